//! Run directories: `config.json`, `checkpoints/`, `logs.jsonl`, `reports/`.
//!
//! Shared and universal runs keep one model under `checkpoints/`;
//! independent runs keep one per domain under `checkpoints/<id>/`. Next to
//! each `model.ckpt` a `trainer.ckpt` stores the Adam moments and the
//! schedule so `--resume` continues exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fit, DomainData, EpochStats, Moments, OptimizerState, ScheduleState, TrainConfig};
use crate::datapipe::DatasetManifest;
use crate::error::{Error, Result};
use crate::netarch::{read_container, write_atomic, write_container, Mode, ModelState, NetworkConfig};
use crate::real::{Precision, Real};
use crate::tensor::Tensor;

/// A training run described by one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Preprocessed dataset manifests, one per domain, in round-robin order.
    pub datasets: Vec<PathBuf>,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_precision() -> Precision {
    Precision::F32
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("run config: {e}")))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut cfg.datasets {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(cfg)
    }

    pub fn manifests(&self) -> Result<Vec<DatasetManifest>> {
        if self.datasets.is_empty() {
            return Err(Error::Config("run config lists no datasets".into()));
        }
        self.datasets.iter().map(|p| DatasetManifest::load(p)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn checkpoints(&self, model: Option<&str>) -> PathBuf {
        let c = self.root.join("checkpoints");
        match model {
            Some(id) => c.join(id),
            None => c,
        }
    }

    pub fn model_ckpt(&self, model: Option<&str>) -> PathBuf {
        self.checkpoints(model).join("model.ckpt")
    }

    pub fn trainer_ckpt(&self, model: Option<&str>) -> PathBuf {
        self.checkpoints(model).join("trainer.ckpt")
    }
}

/// One line of `logs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Domain id of an independent model; absent for joint models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub epoch: usize,
    pub lr: f64,
    pub l_ma: f64,
    pub mean_loss: f64,
    pub domains: BTreeMap<String, f64>,
}

impl EpochLog {
    fn new(model: Option<&str>, s: &EpochStats) -> Self {
        EpochLog {
            model: model.map(str::to_string),
            epoch: s.epoch,
            lr: s.lr,
            l_ma: s.l_ma,
            mean_loss: s.mean_loss,
            domains: s
                .per_domain
                .iter()
                .map(|(k, (sum, n))| (k.clone(), sum / *n as f64))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub checkpoints: Vec<PathBuf>,
    /// Completed epochs per checkpoint.
    pub epochs: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    schedule: ScheduleState,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: BTreeMap<String, u64>,
    frozen: BTreeSet<String>,
}

pub fn save_trainer_state<T: Real>(path: &Path, opt: &OptimizerState<T>, sched: &ScheduleState) -> Result<()> {
    let meta = serde_json::to_value(TrainerMeta {
        schedule: sched.clone(),
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.eps,
        steps: opt.moments.iter().map(|(k, m)| (k.clone(), m.t)).collect(),
        frozen: opt.frozen.clone(),
    })?;
    let owned: Vec<(String, Tensor<T>)> = opt
        .moments
        .iter()
        .flat_map(|(k, m)| {
            [
                (format!("m/{k}"), Tensor::new(&[m.m.len()], m.m.clone())),
                (format!("v/{k}"), Tensor::new(&[m.v.len()], m.v.clone())),
            ]
        })
        .map(|(k, t)| t.map(|t| (k, t)))
        .collect::<Result<_>>()?;
    let tensors: BTreeMap<String, &Tensor<T>> = owned.iter().map(|(k, t)| (k.clone(), t)).collect();
    write_container(path, &meta, &tensors)
}

pub fn load_trainer_state<T: Real>(path: &Path) -> Result<(OptimizerState<T>, ScheduleState)> {
    let c = read_container::<T>(path)?;
    let meta: TrainerMeta =
        serde_json::from_value(c.meta).map_err(|e| Error::format(path, format!("trainer state: {e}")))?;
    let mut moments = BTreeMap::new();
    for (name, t) in meta.steps {
        let get = |prefix: &str| {
            c.tensors
                .get(&format!("{prefix}/{name}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::format(path, format!("missing moment `{prefix}/{name}`")))
        };
        moments.insert(
            name.clone(),
            Moments {
                m: get("m")?,
                v: get("v")?,
                t,
            },
        );
    }
    let opt = OptimizerState {
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
        moments,
        frozen: meta.frozen,
    };
    Ok((opt, meta.schedule))
}

/// Drops log lines of `model` at or after `epoch` (stale lines from an
/// interrupted run that is being resumed).
fn truncate_logs(path: &Path, model: Option<&str>, epoch: usize) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: EpochLog = serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?;
        if entry.model.as_deref() != model || entry.epoch < epoch {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(entry)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

fn train_one<T: Real>(
    dir: &RunDir,
    tag: Option<&str>,
    network: NetworkConfig,
    data: &[DomainData],
    cfg: &TrainConfig,
    resume: bool,
    workers: usize,
) -> Result<usize> {
    let model_path = dir.model_ckpt(tag);
    let state_path = dir.trainer_ckpt(tag);
    let (mut model, mut opt, mut sched) = if resume && state_path.exists() {
        let model = ModelState::<T>::load(&model_path)?;
        let (opt, sched) = load_trainer_state::<T>(&state_path)?;
        log::info!("resuming {} at epoch {}", model_path.display(), sched.epoch);
        (model, opt, sched)
    } else {
        let specs: Vec<_> = data.iter().map(|d| d.spec.clone()).collect();
        (
            ModelState::<T>::build(network, &specs)?,
            OptimizerState::default(),
            ScheduleState::new(cfg),
        )
    };
    truncate_logs(&dir.logs(), tag, sched.epoch)?;
    let logs = dir.logs();
    let snapshot = |model: &ModelState<T>, opt: &OptimizerState<T>, sched: &ScheduleState| -> Result<()> {
        model.save(&model_path)?;
        save_trainer_state(&state_path, opt, sched)
    };
    fit(&mut model, data, cfg, &mut opt, &mut sched, workers, |ev| {
        append_log(&logs, &EpochLog::new(tag, ev.stats))?;
        if ev.checked {
            snapshot(ev.model, ev.opt, ev.sched)?;
        }
        Ok(())
    })?;
    snapshot(&model, &opt, &sched)?;
    Ok(sched.epoch)
}

/// Trains every model of a run, resuming from `dir` when asked.
pub fn train_run<T: Real>(dir: &RunDir, cfg: &RunConfig, resume: bool, workers: usize) -> Result<RunSummary> {
    cfg.network.validate()?;
    cfg.train.validate()?;
    let manifests = cfg.manifests()?;
    let data: Vec<DomainData> = manifests.iter().map(DomainData::load).collect::<Result<_>>()?;
    fs::create_dir_all(dir.root()).map_err(|e| Error::io(dir.root(), e))?;
    if !resume || !dir.config().exists() {
        let mut text = serde_json::to_string_pretty(cfg)?;
        text.push('\n');
        write_atomic(&dir.config(), text.as_bytes())?;
    }
    if !resume && dir.logs().exists() {
        fs::remove_file(dir.logs()).map_err(|e| Error::io(dir.logs(), e))?;
    }
    let mut summary = RunSummary {
        checkpoints: Vec::new(),
        epochs: Vec::new(),
    };
    match cfg.network.mode {
        Mode::Independent => {
            for d in &data {
                let tag = Some(d.spec.id.as_str());
                let e = train_one::<T>(
                    dir,
                    tag,
                    cfg.network.clone(),
                    std::slice::from_ref(d),
                    &cfg.train,
                    resume,
                    workers,
                )?;
                summary.checkpoints.push(dir.model_ckpt(tag));
                summary.epochs.push(e);
            }
        }
        Mode::Shared | Mode::Universal => {
            let e = train_one::<T>(dir, None, cfg.network.clone(), &data, &cfg.train, resume, workers)?;
            summary.checkpoints.push(dir.model_ckpt(None));
            summary.epochs.push(e);
        }
    }
    Ok(summary)
}
