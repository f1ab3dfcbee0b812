//! `metamsr`: synthetic data, prompt construction, training, evaluation and
//! gradient checks from one binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use metamsr_core::backbones::BackboneKind;
use metamsr_core::data::{split_chrono, synth_generate, Dataset, FeatureSchema, SplitMode, Splits, SyntheticConfig};
use metamsr_core::experiment::{gradcheck_all, knowledge_for, mean_report, run_parallel, train_once, SPLIT_RATIOS};
use metamsr_core::knowledge::{build_all_prompts, write_prompts_jsonl, ScenarioStats, VectorStore};
use metamsr_core::metafusion::{Architecture, Baseline};
use metamsr_core::trainer::{evaluate, Checkpoint, MetricsReport, Trainer, TrainerConfig};

/// Experiment description read from `--config` and overridden by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    trainer: TrainerConfig,
    synthetic: SyntheticConfig,
    /// Interaction CSV; the synthetic generator is used when absent.
    dataset: Option<PathBuf>,
    schema: Option<PathBuf>,
    vectors: Option<PathBuf>,
    /// Scenario statistics for prompt construction.
    stats: Option<PathBuf>,
    split_mode: SplitMode,
    seeds: Vec<u64>,
    jobs: usize,
    out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerConfig::default(),
            synthetic: SyntheticConfig::default(),
            dataset: None,
            schema: None,
            vectors: None,
            stats: None,
            split_mode: SplitMode::Global,
            seeds: vec![1],
            jobs: 1,
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Parser)]
#[command(name = "metamsr", version, about = "Knowledge-enhanced multi-scenario CTR experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-scenario dataset with knowledge vectors.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Draw knowledge vectors as pure noise.
        #[arg(long)]
        non_informative: bool,
    },
    /// Build scenario- and user-level prompts as JSONL.
    Prompts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Scenario statistics JSON; summarized from the dataset when absent.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        threshold_t: Option<usize>,
    },
    /// Train one model per seed and report validation and test metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
        split: String,
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Compare analytic and numeric gradients for every model combination.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Scale the embedding gradient to show the check catches errors.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds trained in parallel.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    architecture: Option<Architecture>,
    #[arg(long)]
    baseline: Option<Baseline>,
    #[arg(long)]
    k_layers: Option<usize>,
    #[arg(long)]
    threshold_t: Option<usize>,
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if cfg.seeds.is_empty() {
            bail!("--seeds: at least one seed is required");
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(j) = self.jobs {
            if j == 0 {
                bail!("--jobs must be at least 1");
            }
            cfg.jobs = j;
        }
        Ok(cfg)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating output directory {}", cfg.out.display()))?;
    write_json(&cfg.out.join("config.json"), cfg)
}

fn cmd_synth(common: &Common, non_informative: bool) -> Result<()> {
    let mut cfg = common.resolve()?;
    if non_informative {
        cfg.synthetic.informative = false;
    }
    cfg.synthetic.seed = cfg.seeds[0];
    cfg.seeds.truncate(1);
    prepare_out(&cfg)?;
    let out = synth_generate(&cfg.synthetic)?;
    let dir = &cfg.out;
    out.dataset.save_csv(&dir.join("dataset.csv"))?;
    out.dataset.schema.save_json(&dir.join("schema.json"))?;
    out.vectors.save(&dir.join("vectors.tsv"))?;
    out.truth.save_csv(&out.dataset, &dir.join("groundtruth.csv"))?;
    ScenarioStats::summarize(&out.dataset, "synthetic", &scenario_names(cfg.synthetic.num_scenarios))?
        .save_json(&dir.join("stats.json"))?;
    println!(
        "wrote {} samples, {} users, {} scenarios to {}",
        out.dataset.len(),
        out.dataset.schema.num_users(),
        out.dataset.schema.num_scenarios,
        dir.display()
    );
    Ok(())
}

fn scenario_names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("scenario {i}")).collect()
}

/// The dataset named by the config, or the synthetic draw for `seed`.
fn load_dataset(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Option<VectorStore>)> {
    match (&cfg.dataset, &cfg.schema) {
        (Some(data), Some(schema)) => {
            let schema = FeatureSchema::load_json(schema)?;
            Ok((Dataset::load_csv(data, &schema)?, None))
        }
        (Some(_), None) | (None, Some(_)) => bail!("--dataset and --schema must be given together"),
        (None, None) => {
            let out = synth_generate(&SyntheticConfig {
                seed,
                ..cfg.synthetic.clone()
            })?;
            Ok((out.dataset, Some(out.vectors)))
        }
    }
}

/// Explicit vectors win over the synthetic draw's own.
fn load_vectors(cfg: &RunConfig, drawn: Option<VectorStore>) -> Result<Option<VectorStore>> {
    match &cfg.vectors {
        Some(path) => Ok(Some(VectorStore::load(path)?)),
        None => Ok(drawn),
    }
}

fn cmd_prompts(
    common: &Common,
    dataset: &Option<PathBuf>,
    schema: &Option<PathBuf>,
    stats: &Option<PathBuf>,
    threshold_t: Option<usize>,
) -> Result<()> {
    let mut cfg = common.resolve()?;
    cfg.dataset = dataset.clone().or(cfg.dataset);
    cfg.schema = schema.clone().or(cfg.schema);
    cfg.stats = stats.clone().or(cfg.stats);
    if let Some(t) = threshold_t {
        cfg.trainer.threshold_t = t;
    }
    if cfg.trainer.threshold_t == 0 {
        bail!("--threshold-t must be at least 1");
    }
    prepare_out(&cfg)?;
    let (ds, _) = load_dataset(&cfg, cfg.seeds[0])?;
    let stats = match &cfg.stats {
        Some(path) => ScenarioStats::load_json(path)?,
        None => ScenarioStats::summarize(&ds, "synthetic", &scenario_names(ds.schema.num_scenarios))?,
    };
    let records = build_all_prompts(&ds, &stats, cfg.trainer.threshold_t)?;
    let path = cfg.out.join("prompts.jsonl");
    write_prompts_jsonl(&records, &path)?;
    println!("wrote {} prompts to {}", records.len(), path.display());
    Ok(())
}

fn splits_of(ds: &Dataset, mode: SplitMode) -> Result<Splits> {
    Ok(split_chrono(ds, SPLIT_RATIOS, mode)?)
}

#[derive(Serialize)]
struct SeedReport {
    seed: u64,
    epochs: usize,
    seconds: f64,
    valid: MetricsReport,
    test: MetricsReport,
}

fn cmd_train(common: &Common, flags: &ModelFlags) -> Result<()> {
    let mut cfg = common.resolve()?;
    let model = &mut cfg.trainer.model;
    if let Some(b) = flags.backbone {
        model.backbone = b;
    }
    if let Some(a) = flags.architecture {
        model.architecture = a;
    }
    if let Some(b) = flags.baseline {
        model.baseline = b;
    }
    if let Some(k) = flags.k_layers {
        model.k_layers = k;
    }
    if let Some(t) = flags.threshold_t {
        cfg.trainer.threshold_t = t;
    }
    cfg.vectors = flags.vectors.clone().or(cfg.vectors);
    cfg.dataset = flags.dataset.clone().or(cfg.dataset);
    cfg.schema = flags.schema.clone().or(cfg.schema);
    cfg.trainer.validate()?;
    prepare_out(&cfg)?;
    let needs_vectors = cfg.trainer.model.architecture != Architecture::BackboneOnly;
    let reports = run_parallel(&cfg.seeds, cfg.jobs, |&seed| {
        let (ds, drawn) = load_dataset(&cfg, seed).map_err(to_core)?;
        let vectors = load_vectors(&cfg, drawn).map_err(to_core)?;
        if needs_vectors && vectors.is_none() {
            return Err(metamsr_core::Error::Config(
                "this architecture needs knowledge vectors: pass --vectors".into(),
            ));
        }
        let splits = splits_of(&ds, cfg.split_mode).map_err(to_core)?;
        let mut tc = cfg.trainer.clone();
        tc.seed = seed;
        let store = vectors.as_ref().filter(|_| needs_vectors);
        let (trainer, run) = train_once(&splits, store, &tc)?;
        let dir = cfg.out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(|e| metamsr_core::Error::io(&dir, e))?;
        trainer.checkpoint().save(&dir.join("checkpoint.json"))?;
        trainer.write_history_csv(&dir.join("history.csv"))?;
        let report = SeedReport {
            seed,
            epochs: run.epochs,
            seconds: run.seconds,
            valid: run.valid,
            test: run.test,
        };
        write_json(&dir.join("metrics.json"), &report).map_err(to_core)?;
        Ok(report)
    })?;
    for r in &reports {
        println!(
            "seed {}: {} epochs, test mean AUC {}, test logloss {:.5}",
            r.seed,
            r.epochs,
            fmt_auc(r.test.mean_auc),
            r.test.overall_logloss
        );
    }
    if reports.len() > 1 {
        let tests: Vec<&MetricsReport> = reports.iter().map(|r| &r.test).collect();
        let mean = mean_report(&tests)?;
        write_json(&cfg.out.join("mean_metrics.json"), &mean)?;
        println!("mean over {} seeds: test mean AUC {}", reports.len(), fmt_auc(mean.mean_auc));
    }
    Ok(())
}

fn to_core(e: anyhow::Error) -> metamsr_core::Error {
    metamsr_core::Error::Config(format!("{e:#}"))
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |a| format!("{a:.5}"))
}

fn cmd_eval(common: &Common, checkpoint: &Path, split: &str, vectors: &Option<PathBuf>) -> Result<()> {
    let mut cfg = common.resolve()?;
    cfg.vectors = vectors.clone().or(cfg.vectors);
    let ckpt = Checkpoint::load(checkpoint)?;
    let seed = ckpt.config.seed;
    let (ds, drawn) = load_dataset(&cfg, seed)?;
    if ds.schema != ckpt.schema {
        bail!("dataset schema differs from the one in {}", checkpoint.display());
    }
    let store = load_vectors(&cfg, drawn)?;
    let needs_vectors = ckpt.config.model.architecture != Architecture::BackboneOnly;
    if needs_vectors {
        let vs = store.as_ref().context("this checkpoint needs knowledge vectors: pass --vectors")?;
        ckpt.check_knowledge_dim(vs.dim())?;
    }
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    let know = knowledge_for(store.as_ref().filter(|_| needs_vectors), &trainer.model)?;
    let splits = splits_of(&ds, cfg.split_mode)?;
    let part = match split {
        "train" => &splits.train,
        "valid" => &splits.valid,
        _ => &splits.test,
    };
    let epoch = trainer.state.epoch;
    let report = evaluate(&mut trainer.model, part, &know, split, epoch)?;
    prepare_out(&cfg)?;
    write_json(&cfg.out.join(format!("eval_{split}.json")), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_gradcheck(common: &Common, tolerance: f64, corrupt: bool) -> Result<bool> {
    let cfg = common.resolve()?;
    prepare_out(&cfg)?;
    let report = gradcheck_all(tolerance, corrupt)?;
    for c in &report.cases {
        let groups: Vec<String> = c.groups.iter().map(|(g, e)| format!("{g}={e:.2e}")).collect();
        println!(
            "{} {:<14} {:<20} {:<7} max {:.2e}  {}",
            if c.max_error < tolerance { "ok  " } else { "FAIL" },
            c.backbone.name(),
            c.architecture.name(),
            c.baseline.name(),
            c.max_error,
            groups.join(" ")
        );
    }
    write_json(&cfg.out.join("gradcheck.json"), &report)?;
    let failed = report.cases.iter().filter(|c| c.max_error >= tolerance).count();
    println!("{} of {} combinations within {tolerance:e}", report.cases.len() - failed, report.cases.len());
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { common, non_informative } => cmd_synth(common, *non_informative).map(|_| true),
        Command::Prompts {
            common,
            dataset,
            schema,
            stats,
            threshold_t,
        } => cmd_prompts(common, dataset, schema, stats, *threshold_t).map(|_| true),
        Command::Train { common, model } => cmd_train(common, model).map(|_| true),
        Command::Eval {
            common,
            checkpoint,
            split,
            vectors,
        } => cmd_eval(common, checkpoint, split, vectors).map(|_| true),
        Command::Gradcheck {
            common,
            tolerance,
            corrupt,
        } => cmd_gradcheck(common, *tolerance, *corrupt),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
