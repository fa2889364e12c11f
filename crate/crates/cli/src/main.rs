use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use auscult::datasets::{
    stratified_group_kfold, stratified_kfold, synth_generate, BinaryLabel, ExperimentSetup, Manifest,
    SplitStrategy, SynthesisSpec,
};
use auscult::metrics::{compute_metrics, render_table, MetricsReport};
use auscult::model::checkpoint::Checkpoint;
use auscult::training::{evaluate, load_domain, make_splits, run_experiment, Corpus, ExperimentConfig};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Parser)]
#[command(name = "auscult", version, about = "Lung-sound screening workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Compact,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-device corpus.
    Synth {
        /// Synthesis spec (TOML); defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a stratified k-fold split of one manifest as JSON.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "sample")]
        strategy: Strategy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate one or more setups and write their reports.
    Run {
        /// Setup number 1-5; repeat or comma-separate for several.
        #[arg(long, value_delimiter = ',', required = true)]
        setup: Vec<ExperimentSetup>,
        #[arg(long)]
        manifest_steth: Option<PathBuf>,
        #[arg(long)]
        manifest_phone: Option<PathBuf>,
        /// Experiment config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Spectrogram cache directory (defaults to `<out>/features`).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score a checkpoint on every clip of a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render the reports under a run directory as one table.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP screening service.
    Serve {
        /// Service config (TOML); `AUSCULT_*` environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print an experiment config as TOML.
    Config {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Sample,
    Patient,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn report_paths(out: &Path, setup: ExperimentSetup) -> (PathBuf, PathBuf) {
    let dir = out.join(format!("setup{}", setup.number()));
    (dir.join("report.json"), dir.join("report.txt"))
}

fn run(
    setups: &[ExperimentSetup],
    steth: Option<&Path>,
    phone: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    cache: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let cache = cache.map(Path::to_path_buf).unwrap_or_else(|| out.join("features"));
    let load = |p: Option<&Path>| -> Result<_> {
        p.map(|p| -> Result<_> {
            let m = Manifest::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(load_domain(&m, &cfg, Some(&cache))?)
        })
        .transpose()
    };
    let corpus = Corpus {
        stethoscope: load(steth)?,
        smartphone: load(phone)?,
    };
    std::fs::write(out.join("splits.json"), serde_json::to_string_pretty(&make_splits(&corpus, &cfg)?)?)?;
    for &setup in setups {
        info!("running {setup}");
        let report = run_experiment(setup, &corpus, &cfg, Some(out))?;
        let (json, txt) = report_paths(out, setup);
        std::fs::create_dir_all(json.parent().expect("has parent"))?;
        std::fs::write(&json, report.to_json()?)?;
        let table = render_table(std::slice::from_ref(&report));
        std::fs::write(&txt, &table)?;
        print!("{table}");
    }
    Ok(())
}

fn report(out: &Path) -> Result<()> {
    let mut reports = Vec::new();
    for setup in ExperimentSetup::ALL {
        let (json, _) = report_paths(out, setup);
        if json.exists() {
            reports.push(MetricsReport::from_json(&std::fs::read_to_string(&json)?)?);
        }
    }
    if reports.is_empty() {
        bail!("no setup reports under {}", out.display());
    }
    let table = render_table(&reports);
    std::fs::write(out.join("report.txt"), &table)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&reports)?)?;
    print!("{table}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { spec, seed, out } => {
            let mut s = match spec {
                Some(p) => SynthesisSpec::load(p)?,
                None => SynthesisSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let corpus = synth_generate(&s, &out)?;
            println!(
                "{} ({} clips)\n{} ({} clips)",
                corpus.stethoscope_path.display(),
                corpus.stethoscope.len(),
                corpus.smartphone_path.display(),
                corpus.smartphone.len()
            );
        }
        Command::Split {
            manifest,
            folds,
            seed,
            strategy,
            out,
        } => {
            let m = Manifest::load(&manifest)?;
            let labels = m.labels()?;
            let split = match strategy {
                Strategy::Sample => stratified_kfold(&labels, folds, seed)?,
                Strategy::Patient => {
                    let patients: Vec<String> = m.entries.iter().map(|e| e.patient_id.clone()).collect();
                    stratified_group_kfold(&labels, &patients, folds, seed)?
                }
            };
            let strategy = match strategy {
                Strategy::Sample => SplitStrategy::Sample,
                Strategy::Patient => SplitStrategy::Patient,
            };
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&serde_json::json!({ "strategy": strategy, "split": split }))?,
            )?;
            for (f, (train, test)) in split.folds.iter().enumerate() {
                let count = |idx: &[usize], c| idx.iter().filter(|&&i| labels[i] == c).count();
                println!(
                    "fold {}: train {}N/{}A, test {}N/{}A",
                    f + 1,
                    count(train, BinaryLabel::Normal),
                    count(train, BinaryLabel::Abnormal),
                    count(test, BinaryLabel::Normal),
                    count(test, BinaryLabel::Abnormal)
                );
            }
        }
        Command::Run {
            setup,
            manifest_steth,
            manifest_phone,
            config,
            out,
            cache,
        } => run(
            &setup,
            manifest_steth.as_deref(),
            manifest_phone.as_deref(),
            config.as_deref(),
            &out,
            cache.as_deref(),
        )?,
        Command::Evaluate {
            checkpoint,
            manifest,
            config,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut cfg = load_config(config.as_deref())?;
            cfg.features = ck.features.clone();
            let m = Manifest::load(&manifest)?;
            let data = load_domain(&m, &cfg, None)?;
            let refs: Vec<_> = data.samples.iter().collect();
            let c = evaluate(&ck, &refs, cfg.train.exec)?;
            let metrics = compute_metrics(&c)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({ "confusion": c, "metrics": metrics }))?
            );
        }
        Command::Report { out } => report(&out)?,
        Command::Serve { config } => {
            let cfg = auscult_service::ServiceConfig::load(config.as_deref())?;
            tokio::runtime::Runtime::new()?.block_on(auscult_service::serve(cfg))?;
        }
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => ExperimentConfig::default(),
                Preset::Compact => ExperimentConfig::compact(),
            };
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}
