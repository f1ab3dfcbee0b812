//! Experiment drivers shared by the CLI and the acceptance suite: seeded
//! training runs, the knowledge-enhancement comparison, the architecture
//! ablation, the `K` sweep and the all-combinations gradient check.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, BackboneKind};
use crate::data::{split_chrono, synth_generate, Batch, Dataset, Field, FeatureSchema, Sample, SplitMode, Splits, SyntheticConfig};
use crate::error::{Error, Result};
use crate::gradcore::{finite_diff_model, max_rel_error, sigmoid_logloss, DetRng, HasParams, Matrix, REL_FLOOR};
use crate::knowledge::{Scope, VectorStore};
use crate::metafusion::{Architecture, Baseline, FusionModel, Knowledge, ModelConfig, ScenarioInput};
use crate::trainer::{evaluate, HistoryRow, MetricsReport, Trainer, TrainerConfig};

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub architecture: Architecture,
    pub valid: MetricsReport,
    pub test: MetricsReport,
    pub history: Vec<HistoryRow>,
    pub losses: Vec<f64>,
    pub epochs: usize,
    pub seconds: f64,
}

/// Generates the synthetic data for `seed` and splits it chronologically.
pub fn synth_splits(base: &SyntheticConfig, seed: u64) -> Result<(Splits, VectorStore)> {
    let cfg = SyntheticConfig { seed, ..base.clone() };
    let out = synth_generate(&cfg)?;
    Ok((split_chrono(&out.dataset, SPLIT_RATIOS, SplitMode::Global)?, out.vectors))
}

pub fn knowledge_for(store: Option<&VectorStore>, model: &FusionModel) -> Result<Knowledge> {
    match store {
        Some(vs) => Knowledge::for_model(vs, model),
        None => Knowledge::empty(model),
    }
}

/// Trains one model on `splits.train` with early stopping on `splits.valid`
/// and evaluates it on `splits.test`.
pub fn train_once(splits: &Splits, store: Option<&VectorStore>, cfg: &TrainerConfig) -> Result<(Trainer, RunOutcome)> {
    let started = Instant::now();
    let h = store.map_or(1, VectorStore::dim);
    let mut trainer = Trainer::new(&splits.train.schema, h, cfg.clone())?;
    let know = knowledge_for(store, &trainer.model)?;
    trainer.fit(&splits.train, &splits.valid, &know)?;
    let epoch = trainer.state.epoch;
    let valid = evaluate(&mut trainer.model, &splits.valid, &know, "valid", epoch)?;
    let test = evaluate(&mut trainer.model, &splits.test, &know, "test", epoch)?;
    let outcome = RunOutcome {
        seed: cfg.seed,
        architecture: cfg.model.architecture,
        valid,
        test,
        history: trainer.state.history.clone(),
        losses: trainer.state.losses.clone(),
        epochs: epoch,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((trainer, outcome))
}

/// Per-scenario means of several reports; also the overall log-loss mean.
pub fn mean_report(reports: &[&MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Validation("no reports to average".into()))?;
    let n = reports.len() as f64;
    let mut mean = (*first).clone();
    mean.split = format!("{} (mean of {})", first.split, reports.len());
    mean.overall_logloss = reports.iter().map(|r| r.overall_logloss).sum::<f64>() / n;
    mean.count = reports.iter().map(|r| r.count).sum::<usize>() / reports.len();
    for (d, m) in mean.scenarios.iter_mut().enumerate() {
        let aucs: Option<Vec<f64>> = reports.iter().map(|r| r.auc_of(d)).collect();
        m.auc = aucs.map(|a| a.iter().sum::<f64>() / n);
        let lls: Option<Vec<f64>> = reports.iter().map(|r| r.scenarios[d].logloss).collect();
        m.logloss = lls.map(|l| l.iter().sum::<f64>() / n);
        m.count = reports.iter().map(|r| r.scenarios[d].count).sum::<usize>() / reports.len();
        m.positives = reports.iter().map(|r| r.scenarios[d].positives).sum::<usize>() / reports.len();
    }
    let defined: Vec<f64> = mean.scenarios.iter().filter_map(|m| m.auc).collect();
    mean.mean_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(mean)
}

/// Runs `jobs` closures at a time over `items`, keeping input order.
pub fn run_parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.max(1);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(jobs) {
        let results: Vec<Result<R>> = if chunk.len() == 1 {
            vec![f(&chunk[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|it| s.spawn(|| f(it))).collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub architecture: Architecture,
    pub mean_test: MetricsReport,
    pub runs: Vec<RunOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnhancementReport {
    pub informative: bool,
    pub seeds: Vec<u64>,
    pub full: ArmSummary,
    pub backbone_only: ArmSummary,
    /// `full − backbone_only` mean test AUC per scenario.
    pub delta: Vec<f64>,
    pub seconds: f64,
}

fn arm(runs: Vec<RunOutcome>, arch: Architecture) -> Result<ArmSummary> {
    let tests: Vec<&MetricsReport> = runs.iter().map(|r| &r.test).collect();
    Ok(ArmSummary {
        architecture: arch,
        mean_test: mean_report(&tests)?,
        runs,
    })
}

/// Trains `arch` on every seed, each seed with its own synthetic draw.
pub fn seeded_runs(
    synth: &SyntheticConfig,
    cfg: &TrainerConfig,
    arch: Architecture,
    seeds: &[u64],
    jobs: usize,
) -> Result<ArmSummary> {
    let runs = run_parallel(seeds, jobs, |&seed| {
        let (splits, store) = synth_splits(synth, seed)?;
        let mut c = cfg.clone();
        c.seed = seed;
        c.model.architecture = arch;
        let vs = (arch != Architecture::BackboneOnly).then_some(&store);
        Ok(train_once(&splits, vs, &c)?.1)
    })?;
    arm(runs, arch)
}

/// `full` against `backbone_only` on the same seeds and data draws.
pub fn enhancement(synth: &SyntheticConfig, cfg: &TrainerConfig, seeds: &[u64], jobs: usize) -> Result<EnhancementReport> {
    let started = Instant::now();
    let full = seeded_runs(synth, cfg, Architecture::Full, seeds, jobs)?;
    let backbone_only = seeded_runs(synth, cfg, Architecture::BackboneOnly, seeds, jobs)?;
    let delta = (0..synth.num_scenarios)
        .map(|d| match (full.mean_test.auc_of(d), backbone_only.mean_test.auc_of(d)) {
            (Some(a), Some(b)) => Ok(a - b),
            _ => Err(Error::Validation(format!("scenario {d} has undefined test AUC"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnhancementReport {
        informative: synth.informative,
        seeds: seeds.to_vec(),
        full,
        backbone_only,
        delta,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    /// Architectures sorted by mean test AUC, best first.
    pub ranking: Vec<(Architecture, f64)>,
    pub arms: Vec<ArmSummary>,
    pub best_single_stack: (Architecture, f64),
    pub full_auc: f64,
}

pub fn ablation(synth: &SyntheticConfig, cfg: &TrainerConfig, seeds: &[u64], jobs: usize) -> Result<AblationReport> {
    let mut arms = Vec::new();
    for arch in std::iter::once(Architecture::Full).chain(Architecture::ABLATIONS) {
        arms.push(seeded_runs(synth, cfg, arch, seeds, jobs)?);
    }
    let score = |a: &ArmSummary| a.mean_test.mean_auc.unwrap_or(f64::NAN);
    let mut ranking: Vec<(Architecture, f64)> = arms.iter().map(|a| (a.architecture, score(a))).collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
    let best_single_stack = ranking
        .iter()
        .copied()
        .find(|(a, _)| *a != Architecture::Full)
        .expect("four ablation arms");
    Ok(AblationReport {
        full_auc: score(&arms[0]),
        ranking,
        arms,
        best_single_stack,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    /// Batch losses of the first epoch.
    pub first_epoch_losses: Vec<f64>,
    pub test_mean_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSweepReport {
    pub rows: Vec<KSweepRow>,
    pub best_k: usize,
}

/// Mean of consecutive windows of `width` values (the last may be short).
pub fn window_means(values: &[f64], width: usize) -> Vec<f64> {
    values
        .chunks(width.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

pub fn k_sweep(synth: &SyntheticConfig, cfg: &TrainerConfig, ks: &[usize], seed: u64) -> Result<KSweepReport> {
    let (splits, store) = synth_splits(synth, seed)?;
    let per_epoch = splits.train.len().div_ceil(cfg.batch_size);
    let mut rows = Vec::new();
    for &k in ks {
        let mut c = cfg.clone();
        c.seed = seed;
        c.model.k_layers = k;
        let (_, out) = train_once(&splits, Some(&store), &c)?;
        rows.push(KSweepRow {
            k,
            first_epoch_losses: out.losses[..per_epoch.min(out.losses.len())].to_vec(),
            test_mean_auc: out.test.mean_auc.unwrap_or(f64::NAN),
        });
    }
    let best_k = rows
        .iter()
        .max_by(|a, b| a.test_mean_auc.total_cmp(&b.test_mean_auc))
        .map_or(0, |r| r.k);
    Ok(KSweepReport { rows, best_k })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub backbone: BackboneKind,
    pub architecture: Architecture,
    pub baseline: Baseline,
    /// Largest relative error per parameter group (name prefix before the
    /// first dot).
    pub groups: Vec<(String, f64)>,
    pub max_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cases: Vec<GradcheckCase>,
    pub passed: bool,
}

/// Tiny problem for gradient checks: 4 samples, `D_e = 8`, `H = 8`.
pub fn gradcheck_fixture(seed: u64) -> (Dataset, VectorStore) {
    let mut rng = DetRng::new(seed);
    let schema = FeatureSchema::new(
        vec![
            Field { name: "domain".into(), cardinality: 2 },
            Field { name: "user".into(), cardinality: 3 },
            Field { name: "item".into(), cardinality: 5 },
            Field { name: "ctx".into(), cardinality: 2 },
        ],
        2,
        2,
    )
    .expect("valid fixture schema");
    let samples = (0..4)
        .map(|i| Sample {
            features: vec![(i % 2) as u32, rng.below(3) as u32, rng.below(5) as u32, rng.below(2) as u32],
            label: (i / 2 % 2) as u8,
            order: i as u64,
        })
        .collect();
    let ds = Dataset::new(schema, samples).expect("valid fixture samples");
    let h = 8;
    let mut vs = VectorStore::new(h);
    for d in 0..2 {
        vs.insert(Scope::Scenario, d, (0..h).map(|_| rng.normal()).collect()).expect("finite");
    }
    for u in 0..3 {
        vs.insert(Scope::User, u, (0..h).map(|_| rng.normal()).collect()).expect("finite");
    }
    (ds, vs)
}

pub fn gradcheck_model_config(backbone: BackboneKind, architecture: Architecture, baseline: Baseline) -> ModelConfig {
    ModelConfig {
        backbone,
        architecture,
        baseline,
        backbone_config: BackboneConfig {
            tower_dims: vec![4, 3],
            num_experts: 2,
            ple_shared_experts: 1,
            ple_specific_experts: 1,
            aux_hidden: 3,
            dynamic_hidden: 3,
        },
        k_layers: 2,
        bottom_mid: None,
        bottom_residual: true,
        parallel_hidden: 4,
        meta_hidden: 4,
        meta_dynamic_scale: 1.0,
        epnet_hidden: 3,
        scenario_input: ScenarioInput::UserStack,
    }
}

/// Central-difference step for whole-model checks. One ulp of an O(1) loss
/// divided by a 1e-5 step is ~1e-11, which already exceeds the tolerance
/// at the relative-error floor; at 1e-4 truncation error stays below 1e-6.
pub const MODEL_STEP: f64 = 1e-4;

/// Analytic against central-difference gradients for one model.
pub fn gradcheck_case(model: &mut FusionModel, batch: &Batch, know: &Knowledge) -> Result<Vec<(String, f64)>> {
    let labels = batch.labels();
    let mut loss = |m: &mut FusionModel| -> f64 {
        let z = m.forward(batch, know).expect("forward succeeded once");
        sigmoid_logloss(&labels, &z).expect("valid labels").0
    };
    model.zero_grads();
    let z = model.forward(batch, know)?;
    let (_, _, g) = sigmoid_logloss(&labels, &z)?;
    model.backward(&g)?;
    let mut groups: Vec<(String, f64)> = Vec::new();
    for i in 0..model.param_count() {
        let mut analytic = Matrix::zeros(0, 0);
        let mut name = String::new();
        model.with_param_mut(i, &mut |p| {
            analytic = p.grad.clone();
            name = p.name.clone();
        });
        let numeric = finite_diff_model(model, i, MODEL_STEP, &mut loss);
        let err = max_rel_error(&analytic, &numeric, REL_FLOOR);
        let group = name.split('.').next().unwrap_or(&name).to_string();
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some(slot) => slot.1 = slot.1.max(err),
            None => groups.push((group, err)),
        }
    }
    Ok(groups)
}

/// Every backbone × architecture × baseline on the fixture.
pub fn gradcheck_all(tolerance: f64, corrupt: bool) -> Result<GradcheckReport> {
    let (ds, vs) = gradcheck_fixture(17);
    let batch = Batch::all(&ds);
    let mut cases = Vec::new();
    for backbone in BackboneKind::ALL {
        for architecture in Architecture::ALL {
            for baseline in Baseline::ALL {
                let cfg = gradcheck_model_config(backbone, architecture, baseline);
                let mut model = FusionModel::new(&ds.schema, vs.dim(), cfg, 3)?;
                model.corrupt_backward = corrupt;
                let know = Knowledge::for_model(&vs, &model)?;
                let groups = gradcheck_case(&mut model, &batch, &know)?;
                let max_error = groups.iter().map(|g| g.1).fold(0.0, f64::max);
                cases.push(GradcheckCase {
                    backbone,
                    architecture,
                    baseline,
                    groups,
                    max_error,
                });
            }
        }
    }
    let passed = cases.iter().all(|c| c.max_error < tolerance);
    Ok(GradcheckReport {
        tolerance,
        cases,
        passed,
    })
}
