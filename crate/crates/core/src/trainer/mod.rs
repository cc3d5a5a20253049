//! Optimization loop: Adam, round-robin batches over domains, plateau
//! schedule, checkpointed runs and new-domain adaptation.

mod optim;
mod run;
mod schedule;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::datapipe::{
    augment, par_map, read_label, read_volume, resize, sample_patch, AugmentConfig, DatasetManifest, Split, VolumeKind,
};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss, LossConfig};
use crate::netarch::{DomainSpec, ModelState};
use crate::real::Real;
use crate::seed;
use crate::tensor::Tensor;

pub use optim::{adam_update, decay_exempt, Moments, OptimizerState, ADAM_EPS, BETA1, BETA2};
pub use run::{load_trainer_state, save_trainer_state, train_run, EpochLog, RunConfig, RunDir, RunSummary};
pub use schedule::{should_terminate, update_schedule, ScheduleState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub weight_decay: f64,
    /// Patches per batch.
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Weight of the newest batch loss in the moving average.
    pub ema_alpha: f64,
    /// Epochs between schedule checks.
    pub ema_check_every: usize,
    pub plateau_delta: f64,
    pub lr_factor: f64,
    pub lr_floor: f64,
    /// Hard stop when the schedule has not terminated yet.
    pub max_epochs: usize,
    pub seed: u64,
    /// Chance that a patch is forced to contain foreground.
    pub fg_prob: f64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    /// Per-domain extraction size for patches that are then resized to the
    /// model patch; domains not listed are extracted at the model patch.
    pub extract_patch: BTreeMap<String, [usize; 3]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 3e-4,
            weight_decay: 1e-5,
            batch_size: 2,
            batches_per_epoch: 250,
            ema_alpha: 0.05,
            ema_check_every: 30,
            plateau_delta: 5e-4,
            lr_factor: 5.0,
            lr_floor: 1e-8,
            max_epochs: 1000,
            seed: 0,
            fg_prob: 0.5,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            extract_patch: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_lr", self.initial_lr),
            ("ema_alpha", self.ema_alpha),
            ("plateau_delta", self.plateau_delta),
            ("lr_floor", self.lr_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.ema_alpha > 1.0 {
            return Err(Error::Config("ema_alpha must be <= 1".into()));
        }
        if !(self.lr_factor > 1.0) {
            return Err(Error::Config(format!(
                "lr_factor must exceed 1, got {}",
                self.lr_factor
            )));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.ema_check_every == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size, batches_per_epoch, ema_check_every and max_epochs must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.fg_prob) {
            return Err(Error::Config("fg_prob must lie in [0, 1]".into()));
        }
        self.augment.validate()?;
        self.loss.validate()
    }
}

/// Training cases of one domain held in memory.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub spec: DomainSpec,
    /// (image C×D×H×W, label 1×D×H×W) pairs.
    pub cases: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl DomainData {
    /// Loads the training split of a (preprocessed) manifest.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut cases = Vec::new();
        for c in manifest.split(Split::Train) {
            let image = read_volume(&manifest.resolve(&c.image))?;
            if image.kind != VolumeKind::Image {
                return Err(Error::format(manifest.resolve(&c.image), "expected an image volume"));
            }
            let label_path = c.label.as_ref().expect("validated: training cases are labelled");
            let label = read_label(&manifest.resolve(label_path))?;
            if label.label_bound() > manifest.domain.classes {
                return Err(Error::LabelOutOfRange {
                    label: label.label_bound() - 1,
                    classes: manifest.domain.classes,
                });
            }
            cases.push((image.data, label.data));
        }
        if cases.is_empty() {
            return Err(Error::Config(format!(
                "domain `{}` has no training cases",
                manifest.domain.id
            )));
        }
        Ok(DomainData {
            spec: manifest.domain.clone(),
            cases,
        })
    }
}

/// Mean loss of an epoch, overall and per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub l_ma: f64,
    pub mean_loss: f64,
    /// Domain id → (summed batch loss, batch count).
    pub per_domain: BTreeMap<String, (f64, usize)>,
}

/// A training batch: per-patch image tensors and their flattened labels.
pub struct Batch<T> {
    pub domain: String,
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

/// Seed for patch `k` of the batch at (`epoch`, `iteration`) from `domain`.
pub fn patch_seed(seed_value: u64, epoch: usize, iteration: usize, domain: &str, k: usize) -> u64 {
    seed::derive_ints(
        seed::derive(seed_value, domain),
        &[epoch as u64, iteration as u64, k as u64],
    )
}

/// Samples, augments and resizes one patch.
pub fn prepare_patch(
    data: &DomainData,
    patch: [usize; 3],
    cfg: &TrainConfig,
    seed_value: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    use rand::Rng;
    let mut rng = seed::rng(seed_value);
    let (image, label) = &data.cases[rng.random_range(0..data.cases.len())];
    let extract = cfg.extract_patch.get(&data.spec.id).copied().unwrap_or(patch);
    let (img, lab) = sample_patch(image, label, extract, cfg.fg_prob, rng.random())?;
    let (img, lab) = augment(&img, &lab, &cfg.augment, rng.random())?;
    if extract == patch {
        Ok((img, lab))
    } else {
        Ok((
            resize(&img, patch, VolumeKind::Image),
            resize(&lab, patch, VolumeKind::Label),
        ))
    }
}

/// Assembles the batch for one iteration. Patches are prepared on up to
/// `workers` threads; contents depend only on the seeds.
pub fn prepare_batch<T: Real>(
    data: &DomainData,
    patch: [usize; 3],
    cfg: &TrainConfig,
    epoch: usize,
    iteration: usize,
    workers: usize,
) -> Result<Batch<T>> {
    let seeds: Vec<u64> = (0..cfg.batch_size)
        .map(|k| patch_seed(cfg.seed, epoch, iteration, &data.spec.id, k))
        .collect();
    let patches = par_map(workers, seeds, |_, s| prepare_patch(data, patch, cfg, s));
    let mut images = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::new();
    for p in patches {
        let (img, lab) = p?;
        images.push(img.cast::<T>());
        labels.extend(lab.data().iter().map(|&v| v as usize));
    }
    Ok(Batch {
        domain: data.spec.id.clone(),
        images,
        labels,
    })
}

/// Forward, hybrid loss and backward for one batch. Gradients are left in
/// the model; returns the loss value.
pub fn batch_loss<T: Real>(model: &mut ModelState<T>, batch: &Batch<T>, loss: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let mut bindings = Vec::with_capacity(batch.images.len());
    let mut flat = Vec::with_capacity(batch.images.len());
    for img in &batch.images {
        let x = tape.input(img.clone());
        let (logits, binding) = model.forward(&mut tape, &batch.domain, x)?;
        let shape = tape.value(logits).shape().to_vec();
        let n: usize = shape[1..].iter().product();
        flat.push(tape.reshape(logits, &[shape[0], n])?);
        bindings.push(binding);
    }
    let logits = if flat.len() == 1 {
        flat[0]
    } else {
        tape.concat(&flat, 1)?
    };
    let l = hybrid_loss(&mut tape, logits, &batch.labels, loss)?;
    let value = tape.value(l).item().to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(l)?;
    for b in &bindings {
        model.accumulate_grads(&tape, b);
    }
    Ok(value)
}

/// Geometry shared by every batch of a model: the common patch in shared
/// and universal modes.
fn model_patch<T: Real>(model: &ModelState<T>, domain: &DomainSpec) -> Result<[usize; 3]> {
    Ok(model.domain(&domain.id)?.patch_shape)
}

/// One epoch of `batches_per_epoch` round-robin iterations over `data`.
pub fn train_epoch<T: Real>(
    model: &mut ModelState<T>,
    data: &[DomainData],
    cfg: &TrainConfig,
    opt: &mut OptimizerState<T>,
    sched: &mut ScheduleState,
    workers: usize,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Config("no domains to train".into()));
    }
    let epoch = sched.epoch;
    let mut per_domain: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for i in 0..cfg.batches_per_epoch {
        let global = epoch * cfg.batches_per_epoch + i;
        let d = &data[global % data.len()];
        let patch = model_patch(model, &d.spec)?;
        let batch = prepare_batch::<T>(d, patch, cfg, epoch, i, workers)?;
        model.zero_grads();
        let loss = batch_loss(model, &batch, &cfg.loss)?;
        if !loss.is_finite() {
            model.zero_grads();
            return Err(Error::NonFiniteLoss {
                value: loss,
                epoch,
                iteration: i,
                domain: d.spec.id.clone(),
            });
        }
        opt.step(model, sched.current_lr, cfg.weight_decay);
        sched.observe(loss, cfg);
        total += loss;
        let e = per_domain.entry(d.spec.id.clone()).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;
    }
    let stats = EpochStats {
        epoch,
        lr: sched.current_lr,
        l_ma: sched.l_ma.unwrap_or(f64::NAN),
        mean_loss: total / cfg.batches_per_epoch as f64,
        per_domain,
    };
    sched.epoch += 1;
    Ok(stats)
}

/// Registers `data.spec` on a trained shared or universal model, freezes
/// the shared partition and returns a fresh optimizer over the new
/// domain's parameters. Train with `data` alone afterwards.
pub fn prepare_adaptation<T: Real>(model: &mut ModelState<T>, spec: &DomainSpec) -> Result<(usize, OptimizerState<T>)> {
    let added = model.add_domain(spec.clone())?;
    let opt = OptimizerState::new(model.frozen().clone());
    Ok((added, opt))
}

/// Adds and trains a new domain until the schedule terminates or
/// `max_epochs` pass. Returns the number of parameter elements added.
pub fn adapt_new_domain<T: Real>(
    model: &mut ModelState<T>,
    data: &DomainData,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<usize> {
    cfg.validate()?;
    let (added, mut opt) = prepare_adaptation(model, &data.spec)?;
    let mut sched = ScheduleState::new(cfg);
    fit(
        model,
        std::slice::from_ref(data),
        cfg,
        &mut opt,
        &mut sched,
        workers,
        |_| Ok(()),
    )?;
    Ok(added)
}

/// What the epoch callback of [`fit`] sees.
pub struct EpochEvent<'a, T> {
    pub stats: &'a EpochStats,
    /// A schedule check ran after this epoch.
    pub checked: bool,
    pub model: &'a ModelState<T>,
    pub opt: &'a OptimizerState<T>,
    pub sched: &'a ScheduleState,
}

/// Runs epochs until termination or `max_epochs`, calling `on_epoch`
/// after each one.
pub fn fit<T: Real>(
    model: &mut ModelState<T>,
    data: &[DomainData],
    cfg: &TrainConfig,
    opt: &mut OptimizerState<T>,
    sched: &mut ScheduleState,
    workers: usize,
    mut on_epoch: impl FnMut(EpochEvent<'_, T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    while sched.epoch < cfg.max_epochs && !should_terminate(sched, cfg) {
        let stats = train_epoch(model, data, cfg, opt, sched, workers)?;
        let check = sched.epoch.is_multiple_of(cfg.ema_check_every);
        if check {
            update_schedule(sched, cfg);
        }
        log::info!(
            "epoch {} lr {:.3e} l_ma {:.5} loss {:.5}",
            stats.epoch,
            stats.lr,
            stats.l_ma,
            stats.mean_loss
        );
        on_epoch(EpochEvent {
            stats: &stats,
            checked: check,
            model,
            opt,
            sched,
        })?;
    }
    Ok(())
}
