use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use brainsimsiam::analysis::{
    aggregate_importance, correlate_phenotype, explain, export_report, subject_connectivity, subject_embeddings,
    AnalysisResults, ExplainMode, ImportanceMap,
};
use brainsimsiam::config::{ExperimentConfig, Precision};
use brainsimsiam::data::{build_from_raw, generate_synthetic, load_dataset, make_folds, save_dataset, Dataset, PhenotypeKind};
use brainsimsiam::downstream::{fit_fold_model, run_cv_jobs, CvModel, DownstreamConfig, EvalMode};
use brainsimsiam::nn::checkpoint::{Checkpoint, OptimizerState, RngState};
use brainsimsiam::nn::{Encoder, Predictor, TaskHead};
use brainsimsiam::ssl::{train_ssl, TrainState};
use brainsimsiam::Scalar;

const VERSION: &str = concat!("brainsimsiam ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "brainsimsiam", version, about = "Graph-image Siamese pretraining pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root under which run directories are created.
    #[arg(long, global = true, env = "BRAINSIMSIAM_OUT", default_value = "runs")]
    out: PathBuf,

    /// Folds or explanations evaluated concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Also write heatmap images next to analysis tables.
    #[arg(long, global = true)]
    plots: bool,

    /// Dataset directory, instead of the run's own `dataset`.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    /// Checkpoint directory, instead of the run's own `checkpoint`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted signal.
    Synth,
    /// Build a dataset from a directory of raw scans.
    Build {
        #[arg(long)]
        input: PathBuf,
    },
    /// Self-supervised pretraining.
    Pretrain,
    /// Cross-validated MLP probe on frozen embeddings.
    Probe,
    /// Cross-validated end-to-end fine-tuning.
    Finetune,
    /// Cross-validated training from scratch.
    Supervised,
    /// Embedding and connectivity correlation with phenotypes.
    Correlate,
    /// Per-ROI importance for the embedding and each phenotype.
    Explain,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth | Command::Build { .. } => "dataset",
            Command::Pretrain => "checkpoint",
            Command::Probe => "probe",
            Command::Finetune => "finetune",
            Command::Supervised => "supervised",
            Command::Correlate => "correlate",
            Command::Explain => "explain",
        }
    }
}

struct Run {
    dir: PathBuf,
    config: ExperimentConfig,
    jobs: usize,
    plots: bool,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

impl Run {
    fn open(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        config.validate()?;
        let config = config.resolved();
        let dir = cli.out.join(format!("{}-seed{}", config.hash(), config.seed));
        fs::create_dir_all(&dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
        let snapshot = config.to_toml();
        let snapshot_path = dir.join("config.toml");
        match fs::read_to_string(&snapshot_path) {
            Ok(existing) if existing != snapshot => {
                bail!("{} differs from the resolved configuration", snapshot_path.display())
            }
            Ok(_) => {}
            Err(_) => fs::write(&snapshot_path, &snapshot)?,
        }
        fs::write(dir.join("VERSION"), format!("{VERSION}\n"))?;
        Ok(Self {
            dir,
            config,
            jobs: cli.jobs.max(1),
            plots: cli.plots,
            dataset: cli.dataset.clone(),
            checkpoint: cli.checkpoint.clone(),
        })
    }

    fn dataset_dir(&self) -> Result<PathBuf> {
        let path = self
            .dataset
            .clone()
            .or_else(|| self.config.dataset.path.clone())
            .unwrap_or_else(|| self.dir.join("dataset"));
        if !path.exists() {
            bail!(
                "dataset not found at {}: run `brainsimsiam synth` or `brainsimsiam build` first, or pass --dataset",
                path.display()
            );
        }
        Ok(path)
    }

    fn checkpoint_dir(&self) -> Result<PathBuf> {
        let path = self.checkpoint.clone().unwrap_or_else(|| self.dir.join("checkpoint"));
        if !path.exists() {
            bail!(
                "checkpoint not found at {}: run `brainsimsiam pretrain` first, or pass --checkpoint",
                path.display()
            );
        }
        Ok(path)
    }

    /// Writes a stage into a scratch directory, then moves it into place.
    /// Completed stages are never overwritten.
    fn stage(&self, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let target = self.dir.join(name);
        if target.exists() {
            bail!("{} already exists; completed stages are write-once", target.display());
        }
        let scratch = self.dir.join(format!(".{name}.partial"));
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        fs::create_dir_all(&scratch)?;
        write(&scratch)?;
        fs::rename(&scratch, &target)?;
        Ok(target)
    }
}

/// Order-preserving map over `items` with up to `jobs` worker threads.
fn par_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(jobs.max(1)) {
        if jobs <= 1 {
            out.push(f(&chunk[0])?);
            continue;
        }
        let results: Vec<Result<O>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|item| scope.spawn(|| f(item))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn folds_for<T: Scalar>(dataset: &Dataset<T>, config: &DownstreamConfig, phenotype: &str) -> Result<brainsimsiam::data::FoldSplit> {
    let categorical = dataset.phenotypes.get(phenotype)?.kind == PhenotypeKind::Categorical;
    let stratify = (config.stratify && categorical).then_some(phenotype);
    Ok(make_folds(dataset, config.folds, stratify, config.seed)?)
}

fn pretrain<T: Scalar>(run: &Run) -> Result<PathBuf> {
    let cfg = &run.config;
    let dataset = load_dataset::<T>(run.dataset_dir()?)?;
    let model = cfg.model_config();
    let encoder = Encoder::new(&model, dataset.n_rois(), dataset.atlas.shape(), cfg.seed)?;
    let predictor = Predictor::new(&model, cfg.seed);
    let state = train_ssl(&dataset, TrainState::new(encoder, predictor), &cfg.train, &cfg.augment, None)?;
    run.stage("checkpoint", |dir| {
        let ck = Checkpoint {
            optimizer: OptimizerState {
                kind: "sgd".into(),
                epochs_completed: state.epochs_completed,
                learning_rate: cfg.train.learning_rate,
                weight_decay: cfg.train.weight_decay,
            },
            rng: RngState {
                seed: cfg.seed,
                next_epoch: state.epochs_completed,
            },
            config: serde_json::to_value(cfg)?,
            encoder: state.encoder.clone(),
            predictor: Some(state.predictor.clone()),
            head: None,
        };
        ck.save(dir)?;
        fs::write(dir.join("train_log.tsv"), state.log.to_tsv())?;
        fs::write(dir.join("timing.tsv"), state.log.timing_tsv())?;
        Ok(())
    })
}

fn load_encoder<T: Scalar>(run: &Run) -> Result<Encoder<T>> {
    let dir = run.checkpoint_dir()?;
    Ok(Checkpoint::<T>::load(&dir)
        .with_context(|| format!("cannot load checkpoint {}", dir.display()))?
        .encoder)
}

fn downstream<T: Scalar>(run: &Run, mode: EvalMode) -> Result<PathBuf> {
    let cfg = &run.config;
    let dataset = load_dataset::<T>(run.dataset_dir()?)?;
    let encoder = match mode {
        EvalMode::Supervised => Encoder::new(&cfg.model_config(), dataset.n_rois(), dataset.atlas.shape(), cfg.seed)?,
        _ => load_encoder(run)?,
    };
    let mut config = cfg.downstream.clone();
    config.mode = mode;
    let folds = folds_for(&dataset, &config, &config.phenotype)?;
    let model = CvModel {
        head_hidden: encoder.config.head_hidden_dims(),
        encoder: &encoder,
    };
    let report = run_cv_jobs(&dataset, &folds, &model, &config, None, run.jobs)?;
    run.stage(mode.as_str(), |dir| {
        fs::write(dir.join("metrics.tsv"), report.to_tsv())?;
        fs::write(dir.join("instance_metrics.tsv"), report.instance_tsv())?;
        fs::write(dir.join("folds.json"), serde_json::to_string_pretty(&folds)? + "\n")?;
        Ok(())
    })
}

fn correlate<T: Scalar>(run: &Run) -> Result<PathBuf> {
    let cfg = &run.config;
    let dataset = load_dataset::<T>(run.dataset_dir()?)?;
    let encoder = load_encoder::<T>(run)?;
    let subjects = dataset.subjects();
    let embeddings = subject_embeddings(&encoder, &dataset, &subjects)?;
    let fc = subject_connectivity(&dataset, &subjects)?;
    let mut results = AnalysisResults::default();
    for name in &cfg.analysis.phenotypes {
        let values: Vec<f64> = subjects
            .iter()
            .map(|s| dataset.phenotypes.value(name, s))
            .collect::<brainsimsiam::Result<_>>()?;
        let folds = folds_for(&dataset, &cfg.downstream, name)?;
        results
            .correlations
            .push(correlate_phenotype(name, &subjects, &embeddings, &fc, &values, Some(&folds))?);
    }
    run.stage("correlate", |dir| {
        export_report(&results, dir, run.plots)?;
        Ok(())
    })
}

fn explain_scope<T: Scalar>(
    run: &Run,
    dataset: &Dataset<T>,
    folds: &brainsimsiam::data::FoldSplit,
    scope: &str,
    model: impl Fn(usize) -> Result<(Encoder<T>, Option<TaskHead<T>>)>,
) -> Result<ImportanceMap> {
    let cfg = &run.config;
    let mode = if scope == "embedding" { ExplainMode::Embedding } else { ExplainMode::Prediction };
    let mut maps = Vec::new();
    for fold in 0..folds.k {
        let (encoder, head) = model(fold)?;
        let mut idx: Vec<usize> = folds
            .test_subjects(fold)
            .iter()
            .flat_map(|s| dataset.instances_of(s))
            .collect();
        if let Some(cap) = cfg.analysis.max_instances_per_fold {
            idx.truncate(cap);
        }
        let values = par_map(&idx, run.jobs, |&k| {
            Ok(explain(&encoder, head.as_ref(), &dataset.instances[k], &dataset.atlas, &cfg.analysis.explain, mode)?)
        })?;
        maps.extend(values.into_iter().map(|values| ImportanceMap {
            values,
            scope: scope.to_owned(),
            fold: Some(fold),
        }));
        log::info!("explained {scope} fold {fold}");
    }
    Ok(aggregate_importance(&maps)?)
}

fn explain_cmd<T: Scalar>(run: &Run) -> Result<PathBuf> {
    let cfg = &run.config;
    let dataset = load_dataset::<T>(run.dataset_dir()?)?;
    let encoder = load_encoder::<T>(run)?;
    let mut results = AnalysisResults::default();
    let first = cfg.analysis.phenotypes.first().unwrap_or(&cfg.downstream.phenotype);
    let folds = folds_for(&dataset, &cfg.downstream, first)?;
    results
        .importance
        .push(explain_scope(run, &dataset, &folds, "embedding", |_| Ok((encoder.clone(), None)))?);
    for name in &cfg.analysis.phenotypes {
        let mut config = cfg.downstream.clone();
        config.mode = EvalMode::Probe;
        config.phenotype = name.clone();
        let folds = folds_for(&dataset, &config, name)?;
        let model = CvModel {
            head_hidden: encoder.config.head_hidden_dims(),
            encoder: &encoder,
        };
        let map = explain_scope(run, &dataset, &folds, name, |fold| {
            let fit = fit_fold_model(&dataset, &folds, fold, &model, &config)?;
            Ok((encoder.clone(), Some(fit.head)))
        })?;
        results.importance.push(map);
    }
    run.stage("explain", |dir| {
        export_report(&results, dir, run.plots)?;
        Ok(())
    })
}

fn execute<T: Scalar>(command: &Command, run: &Run) -> Result<PathBuf> {
    let cfg = &run.config;
    match command {
        Command::Synth => {
            let dataset = generate_synthetic::<T>(&cfg.dataset.synth, cfg.seed)?;
            run.stage("dataset", |dir| Ok(save_dataset(&dataset, dir)?))
        }
        Command::Build { input } => {
            let dataset = build_from_raw::<T>(input, &cfg.graph, &cfg.dataset.blocks)?;
            run.stage("dataset", |dir| Ok(save_dataset(&dataset, dir)?))
        }
        Command::Pretrain => pretrain::<T>(run),
        Command::Probe => downstream::<T>(run, EvalMode::Probe),
        Command::Finetune => downstream::<T>(run, EvalMode::Finetune),
        Command::Supervised => downstream::<T>(run, EvalMode::Supervised),
        Command::Correlate => correlate::<T>(run),
        Command::Explain => explain_cmd::<T>(run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = Run::open(&cli).and_then(|run| {
        log::info!("{} -> {}", cli.command.stage(), run.dir.display());
        match run.config.precision {
            Precision::Float32 => execute::<f32>(&cli.command, &run),
            Precision::Float64 => execute::<f64>(&cli.command, &run),
        }
    });
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
