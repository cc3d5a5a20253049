//! `u2net`: synthetic data, preprocessing, training, adaptation,
//! evaluation and parameter accounting from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use u2net::datapipe::{num_workers, plan_patch, preprocess_dataset, synth_generate, DatasetManifest, SynthConfig};
use u2net::eval::{evaluate_dataset, EvalReport};
use u2net::netarch::{closed_form_count, container_precision, DomainSpec, Mode, ModelState, Scope};
use u2net::trainer::{adapt_new_domain, train_run, DomainData, RunConfig, RunDir, TrainConfig};
use u2net::{Precision, Real};

#[derive(Parser)]
#[command(name = "u2net", version, about = "Multi-domain 3D segmentation with domain adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic datasets, one directory per domain.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Crop, resample to the median spacing and normalize a dataset.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the domain's patch shape and level count with the
        /// heuristic plan for its median extent.
        #[arg(long)]
        plan_patch: bool,
    },
    /// Train models described by a run config.
    Train {
        /// Run config; defaults to `<run-dir>/config.json` when resuming.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Add a new domain to a trained shared or universal model.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        new_manifest: PathBuf,
        /// Run config whose `train` section drives adaptation.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint; defaults to `model.<id>.ckpt` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score test splits and write JSON and text reports.
    Eval {
        /// One or more checkpoints; each manifest is scored by the first
        /// checkpoint that knows its domain.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Row label in the table.
        #[arg(long)]
        name: Option<String>,
    },
    /// Count parameters for a run config (all modes) or a checkpoint.
    Params {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// comparable, total or per-domain-added:<id>
        #[arg(long, default_value = "comparable")]
        scope: Scope,
    },
}

#[derive(Deserialize)]
struct SynthFile {
    #[serde(default)]
    seed: u64,
    domains: Vec<SynthDomain>,
}

#[derive(Deserialize)]
struct SynthDomain {
    spec: DomainSpec,
    #[serde(default)]
    synth: SynthConfig,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let file: SynthFile = read_json(config)?;
    let seed = seed.unwrap_or(file.seed);
    for d in &file.domains {
        let dir = out.join(&d.spec.id);
        let m = synth_generate(&d.spec, &d.synth, seed, &dir)?;
        println!(
            "{}\t{}\t{}",
            d.spec.id,
            dir.join("manifest.json").display(),
            m.checksum()?
        );
    }
    Ok(())
}

fn preprocess(manifest: &Path, out: &Path, plan: bool) -> Result<()> {
    let m = DatasetManifest::load(manifest)?;
    let (mut processed, reports) = preprocess_dataset(&m, out, num_workers())?;
    for r in &reports {
        println!("{}", serde_json::to_string(r)?);
    }
    if plan {
        let extents: Vec<[usize; 3]> = reports.iter().map(|r| r.extent).collect();
        let p = plan_patch(u2net::datapipe::median_extent(&extents));
        processed.domain.levels = p.levels;
        processed.domain.patch_shape = p.patch;
        processed.save(&out.join("manifest.json"))?;
        log::info!("planned patch {:?} with {} levels", p.patch, p.levels);
    }
    Ok(())
}

fn train(
    config: Option<&Path>,
    run_dir: &Path,
    mode: Option<Mode>,
    resume: bool,
    max_epochs: Option<usize>,
) -> Result<()> {
    let dir = RunDir::new(run_dir);
    let path = match config {
        Some(p) => p.to_path_buf(),
        None if resume => dir.config(),
        None => bail!("--config is required unless --resume is given"),
    };
    let mut cfg = RunConfig::load(&path)?;
    if let Some(m) = mode {
        cfg.network.mode = m;
    }
    if let Some(e) = max_epochs {
        cfg.train.max_epochs = e;
    }
    let summary = match cfg.precision {
        Precision::F32 => train_run::<f32>(&dir, &cfg, resume, num_workers())?,
        Precision::F64 => train_run::<f64>(&dir, &cfg, resume, num_workers())?,
    };
    for (c, e) in summary.checkpoints.iter().zip(&summary.epochs) {
        println!("{}\t{e} epochs", c.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct AdaptReport {
    domain: String,
    checkpoint: PathBuf,
    added_parameters: u64,
    comparable_parameters: u64,
    added_ratio: f64,
    shared_checksum_before: String,
    shared_checksum_after: String,
}

fn adapt_with<T: Real>(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    train: &TrainConfig,
    out: &Path,
) -> Result<AdaptReport> {
    let mut model = ModelState::<T>::load(checkpoint)?;
    let before = model.shared_checksum();
    let data = DomainData::load(manifest)?;
    adapt_new_domain(&mut model, &data, train, num_workers())?;
    let after = model.shared_checksum();
    if before != after {
        bail!("shared parameters changed during adaptation");
    }
    model.save(out)?;
    let added = model.count_parameters(&Scope::DomainAdded(manifest.domain.id.clone()))?;
    let comparable = model.count_parameters(&Scope::Comparable)?;
    Ok(AdaptReport {
        domain: manifest.domain.id.clone(),
        checkpoint: out.to_path_buf(),
        added_parameters: added,
        comparable_parameters: comparable,
        added_ratio: added as f64 / comparable as f64,
        shared_checksum_before: before,
        shared_checksum_after: after,
    })
}

fn adapt(
    checkpoint: &Path,
    new_manifest: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    max_epochs: Option<usize>,
) -> Result<()> {
    let manifest = DatasetManifest::load(new_manifest)?;
    let mut train = match config {
        Some(p) => RunConfig::load(p)?.train,
        None => TrainConfig::default(),
    };
    if let Some(e) = max_epochs {
        train.max_epochs = e;
    }
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name(format!("model.{}.ckpt", manifest.domain.id)),
    };
    let report = match container_precision(checkpoint)? {
        Precision::F32 => adapt_with::<f32>(checkpoint, &manifest, &train, &out)?,
        Precision::F64 => adapt_with::<f64>(checkpoint, &manifest, &train, &out)?,
    };
    write_json(&out.with_extension("adapt.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval_with<T: Real>(checkpoints: &[PathBuf], manifests: &[PathBuf], report: &Path, name: Option<&str>) -> Result<()> {
    let models: Vec<ModelState<T>> = checkpoints
        .iter()
        .map(|c| ModelState::<T>::load(c).with_context(|| format!("loading {}", c.display())))
        .collect::<Result<_>>()?;
    let mut domains = Vec::new();
    for path in manifests {
        let m = DatasetManifest::load(path)?;
        let model = models
            .iter()
            .find(|model| model.domain(&m.domain.id).is_ok())
            .with_context(|| format!("no checkpoint has domain `{}`", m.domain.id))?;
        domains.push(evaluate_dataset(model, &m, Some(&report.join("predictions")))?);
    }
    let label = name.map(str::to_string).unwrap_or_else(|| models[0].mode().to_string());
    let r = EvalReport::new(label, domains);
    r.write(report)?;
    print!("{}", r.table());
    Ok(())
}

fn eval(checkpoints: &[PathBuf], manifests: &[PathBuf], report: &Path, name: Option<&str>) -> Result<()> {
    match container_precision(&checkpoints[0])? {
        Precision::F32 => eval_with::<f32>(checkpoints, manifests, report, name),
        Precision::F64 => eval_with::<f64>(checkpoints, manifests, report, name),
    }
}

#[derive(Serialize)]
struct ParamRow {
    mode: Mode,
    parameters: u64,
    /// Relative to the shared model.
    ratio: f64,
}

fn params(config: Option<&Path>, checkpoint: Option<&Path>, scope: &Scope) -> Result<()> {
    if let Some(c) = checkpoint {
        let model = ModelState::<f64>::load(c)?;
        let enumerated = model.count_parameters(scope)?;
        let closed = closed_form_count(model.config(), model.domains(), scope)?;
        let out = BTreeMap::from([
            ("mode", serde_json::to_value(model.mode())?),
            ("scope", serde_json::to_value(scope.to_string())?),
            ("enumerated", enumerated.into()),
            ("closed_form", closed.into()),
        ]);
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    let cfg = RunConfig::load(config.expect("clap requires --config or --checkpoint"))?;
    let specs: Vec<DomainSpec> = cfg.manifests()?.into_iter().map(|m| m.domain).collect();
    let shared = closed_form_count(&cfg.network.clone().with_mode(Mode::Shared), &specs, scope)?;
    println!("{:<12} {:>14} {:>8}", "mode", format!("#par ({scope})"), "ratio");
    for mode in Mode::ALL {
        let n = closed_form_count(&cfg.network.clone().with_mode(mode), &specs, scope)?;
        let row = ParamRow {
            mode,
            parameters: n,
            ratio: n as f64 / shared.max(1) as f64,
        };
        println!("{:<12} {:>14} {:>7.3}x", row.mode, row.parameters, row.ratio);
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { config, out, seed } => synth(&config, &out, seed),
        Command::Preprocess {
            manifest,
            out,
            plan_patch,
        } => preprocess(&manifest, &out, plan_patch),
        Command::Train {
            config,
            run_dir,
            mode,
            resume,
            max_epochs,
        } => train(config.as_deref(), &run_dir, mode, resume, max_epochs),
        Command::Adapt {
            checkpoint,
            new_manifest,
            config,
            out,
            max_epochs,
        } => adapt(
            &checkpoint,
            &new_manifest,
            config.as_deref(),
            out.as_deref(),
            max_epochs,
        ),
        Command::Eval {
            checkpoint,
            manifest,
            report,
            name,
        } => eval(&checkpoint, &manifest, &report, name.as_deref()),
        Command::Params {
            config,
            checkpoint,
            scope,
        } => params(config.as_deref(), checkpoint.as_deref(), &scope),
    }
}
