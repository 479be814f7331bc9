use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use histocon::data::synth::{generate_synthetic, SyntheticDatasetSpec};
use histocon::data::{preprocess, BackgroundParams, Cohort, Dataset};
use histocon::encoder::ExtractMode;
use histocon::features::{extract_cohort_features, FeatureStore};
use histocon::matrix::{collect_report, run_matrix, runs_root, write_report, ExperimentConfig};
use histocon::metrics::Metric;
use histocon::mil::{
    class_count, cross_val_metric, deploy_external, load_bags, load_models, make_folds, save_models, train_mil,
    write_deployment, MilConfig,
};
use histocon::sampling::Strategy;
use histocon::trainer::{pretrain_dataset, TrainConfig};
use histocon::Error;

const TARGET_FILE: &str = "target.txt";

#[derive(Parser)]
#[command(
    name = "histocon",
    version,
    about = "Contrastive pretraining and MIL evaluation on tessellated slides"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic texture dataset.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rescale and tessellate source images into a dataset.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        mpp: f64,
        #[arg(long, default_value_t = 224)]
        patch: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining of the stage encoder.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Encode every slide with a frozen checkpoint.
    ExtractFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "S4")]
        mode: ExtractMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated attention-MIL training on the internal cohort.
    TrainMil {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the external cohort with every fold model.
    Deploy {
        #[arg(long)]
        models: PathBuf,
        /// Dataset directory holding the external cohort.
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the report of a matrix run from its score files.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run the full fraction × strategy × mode matrix.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run root; `CF_RUNS_DIR` takes precedence.
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
}

/// Failure with a chosen exit code.
struct Exit(u8, anyhow::Error);

fn classify(err: anyhow::Error) -> Exit {
    let code = match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Parse { .. } | Error::InvalidTemperature(_)) => 2,
        Some(_) => 4,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 4,
        None => 1,
    };
    Exit(code, err)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<(), Exit> {
    match command {
        Command::Matrix { config, data, runs } => matrix(&config, &data, &runs),
        other => run_simple(other).map_err(classify),
    }
}

fn run_simple(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => SyntheticDatasetSpec::read(&p)?,
                None => SyntheticDatasetSpec::default(),
            };
            spec.validate()?;
            let ds = generate_synthetic(&spec, &out)?;
            println!("wrote {} slides to {}", ds.slides.len(), out.display());
        }
        Command::Preprocess { input, mpp, patch, out } => {
            let r = preprocess(&input, &out, mpp, patch, &BackgroundParams::default())?;
            for (id, why) in &r.skipped {
                println!("skipped {id}: {why}");
            }
            println!("wrote {} slides to {}", r.dataset.slides.len(), out.display());
        }
        Command::Pretrain {
            config,
            data,
            out,
            fraction,
            strategy,
            resume,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::read(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(f) = fraction {
                cfg.data_fraction = f;
            }
            if let Some(s) = strategy {
                cfg.plan.strategy = s;
            }
            cfg.validate()?;
            let ds = Dataset::open(&data)?;
            let r = pretrain_dataset(&cfg, &ds, &out, None, resume)?;
            if let Some(last) = r.epoch_losses.last() {
                println!("final epoch loss {last:.4}");
            }
            println!("checkpoint {}", r.final_checkpoint.display());
        }
        Command::ExtractFeatures {
            checkpoint,
            data,
            mode,
            out,
        } => {
            let ds = Dataset::open(&data)?;
            let store = extract_cohort_features(&checkpoint, mode, &ds, &out)?;
            println!(
                "wrote {} feature files (D = {}, {} skipped) to {}",
                store.slides.len(),
                store.dim,
                store.skipped.len(),
                out.display()
            );
        }
        Command::TrainMil {
            features,
            data,
            target,
            folds,
            config,
            out,
        } => {
            let mut mil = match config {
                Some(p) => MilConfig::read(&p)?,
                None => MilConfig::default(),
            };
            if let Some(k) = folds {
                mil.folds = k;
            }
            mil.validate()?;
            let ds = Dataset::open(&data)?;
            if !ds.targets.contains(&target) {
                bail!(Error::Config(format!("target `{target}` not in {}", data.display())));
            }
            let store = FeatureStore::open(&features)?;
            let bags = load_bags(&store, &ds, &target, Cohort::Internal)?;
            let classes = class_count(&bags);
            let splits = make_folds(&bags, mil.folds, mil.seed)?;
            let models = train_mil(&mil, &bags, &splits, classes)?;
            save_models(&out, &models, &splits)?;
            std::fs::write(out.join(TARGET_FILE), format!("{target}\n"))
                .with_context(|| format!("writing {}", out.display()))?;
            for metric in Metric::ALL {
                if let Some(v) = cross_val_metric(&models, metric) {
                    println!("cv {} {v:.4}", metric.name());
                }
            }
        }
        Command::Deploy {
            models,
            cohort,
            features,
            out,
        } => {
            let target = std::fs::read_to_string(models.join(TARGET_FILE))
                .with_context(|| format!("reading target of {}", models.display()))?
                .trim()
                .to_string();
            let trained = load_models(&models)?;
            let ds = Dataset::open(&cohort)?;
            let store = FeatureStore::open(&features)?;
            let bags = load_bags(&store, &ds, &target, Cohort::External)?;
            let dep = deploy_external(&trained, &bags)?;
            write_deployment(&out, &dep)?;
            for (metric, v) in &dep.mean {
                println!("{} {v:.4}", metric.name());
            }
        }
        Command::Report { dir } => {
            let report = collect_report(&dir)?;
            write_report(&report)?;
            print!("{}", report.to_text());
        }
        Command::Matrix { .. } => unreachable!("handled in run"),
    }
    Ok(())
}

fn matrix(config: &Path, data: &Path, runs: &Path) -> Result<(), Exit> {
    let (cfg, ds) = (|| -> anyhow::Result<_> {
        let cfg = ExperimentConfig::read(config)?;
        cfg.validate()?;
        Ok((cfg, Dataset::open(data)?))
    })()
    .map_err(classify)?;
    let report = run_matrix(&cfg, &ds, &runs_root(runs)).map_err(|e| classify(e.into()))?;
    print!("{}", report.to_text());
    println!(
        "cache: {} pretrained, {} reused; report in {}",
        report.cache.pretrained,
        report.cache.reused,
        report.dir.display()
    );
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Exit(
            3,
            anyhow::anyhow!("{} of {} cells failed", report.failures.len(), report.cells.len()),
        ))
    }
}
