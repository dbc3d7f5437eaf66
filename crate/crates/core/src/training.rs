//! Latitude-weighted multi-step loss, AdamW with per-component learning
//! rates, the training loop and the stability harness.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::datasets::Dataset;
use crate::dynamics::{forecast, Batch, Pipeline, SolverConfig};
use crate::error::{Error, Result};
use crate::io::container::ArrayContainer;
use crate::models::{BackboneConfig, BundleConfig, Component, Fwd, ModelBundle, SourceModelConfig};

/// Channels that enter the loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSubset {
    /// Every channel of the state.
    All,
    /// The catalog's scored channels (the five headline variables on
    /// reanalysis data, everything non-constant otherwise).
    #[default]
    Scored,
    Indices(Vec<usize>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub channels: ChannelSubset,
}

impl LossConfig {
    pub fn resolve(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let k = ds.channels();
        let idx = match &self.channels {
            ChannelSubset::All => (0..k).collect(),
            ChannelSubset::Scored => ds.catalog.scored_channels(),
            ChannelSubset::Indices(v) => v.clone(),
        };
        if idx.is_empty() || idx.iter().any(|&c| c >= k) {
            return Err(Error::config("loss.channels", format!("needs a nonempty subset of 0..{k}")));
        }
        Ok(idx)
    }
}

fn check_loss_shapes(pred: &[usize], target: &[usize], alpha: usize) -> Result<()> {
    if pred != target {
        return Err(Error::Loss(format!("prediction {pred:?} and target {target:?} differ")));
    }
    if pred.len() < 2 || pred[pred.len() - 2] != alpha {
        return Err(Error::Loss(format!("{alpha} latitude weights for shape {pred:?}")));
    }
    Ok(())
}

/// `mean(α(h) (pred − target)²)` over every step, channel and cell.
pub fn multi_task_loss(pred: &ArrayD<f64>, target: &ArrayD<f64>, alpha: &Array1<f64>) -> Result<f64> {
    check_loss_shapes(pred.shape(), target.shape(), alpha.len())?;
    let nd = pred.ndim();
    let mut total = 0.0;
    for (ix, d) in (pred - target).indexed_iter() {
        total += alpha[ix[nd - 2]] * d * d;
    }
    Ok(total / pred.len() as f64)
}

/// The same loss on the tape, restricted to `channels` along axis 2 of a
/// `(B, N, K, H, W)` prediction.
pub fn loss_var(f: &mut Fwd, pred: Var, target: &ArrayD<f64>, alpha: &Array1<f64>, channels: &[usize]) -> Result<Var> {
    let k = f.tape.shape(pred).get(2).copied().unwrap_or(0);
    check_loss_shapes(f.tape.shape(pred), target.shape(), alpha.len())?;
    if channels.len() == k && channels.iter().enumerate().all(|(i, &c)| i == c) {
        return Ok(f.tape.weighted_mse(pred, target, alpha));
    }
    let parts: Vec<Var> = channels.iter().map(|&c| f.tape.slice_axis(pred, 2, c, c + 1)).collect();
    let sub = f.tape.concat(&parts, 2);
    let tsub = target.select(Axis(2), channels);
    Ok(f.tape.weighted_mse(sub, &tsub, alpha))
}

/// Linear warmup from 1e-8 to the peak, then cosine decay to a 1e-8 floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup: usize,
    pub total: usize,
}

pub const SCHEDULE_START: f64 = 1e-8;
pub const SCHEDULE_FLOOR: f64 = 1e-8;

impl Schedule {
    /// Rate at `step` for a component whose peak rate is `peak`. A zero peak
    /// gives zero throughout.
    pub fn rate(&self, step: usize, peak: f64) -> f64 {
        if peak <= 0.0 {
            return 0.0;
        }
        let start = SCHEDULE_START.min(peak);
        let floor = SCHEDULE_FLOOR.min(peak);
        if step < self.warmup {
            return start + (peak - start) * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return if step <= self.warmup { peak } else { floor };
        }
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// `(base, advection)` rates at `step`.
pub fn lr_schedule(schedule: &Schedule, optim: &OptimConfig, step: usize) -> (f64, f64) {
    (schedule.rate(step, optim.lr), schedule.rate(step, optim.advection_lr))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak rate for the velocity and source models.
    pub lr: f64,
    /// Peak rate for the advection model.
    pub advection_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, if set.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            advection_lr: 1e-4,
            weight_decay: 1e-5,
            warmup_steps: 10,
            epochs: 1,
            batch_size: 8,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("advection_lr", self.advection_lr), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("optim.{name}"), "must be finite and non-negative"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("optim.grad_clip", "must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, samples: usize) -> Schedule {
        let mut total = self.epochs * self.steps_per_epoch(samples);
        if let Some(m) = self.max_steps {
            total = total.min(m);
        }
        Schedule {
            warmup: self.warmup_steps.min(total),
            total,
        }
    }

    /// Peak rate of a component.
    pub fn peak(&self, component: Component) -> f64 {
        match component {
            Component::Advection => self.advection_lr,
            Component::Velocity | Component::Source => self.lr,
        }
    }
}

/// Decoupled-weight-decay Adam. Parameters flagged `decay = false`
/// (positional embeddings) are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(bundle: &ModelBundle) -> Self {
        let zeros = || bundle.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with rates `(base, advection)`.
    pub fn update(&mut self, bundle: &mut ModelBundle, grads: &[Option<Tensor>], rates: (f64, f64), cfg: &OptimConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, p) in bundle.params.iter_mut().enumerate() {
            let lr = if p.component == Component::Advection { rates.1 } else { rates.0 };
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            if lr == 0.0 {
                continue;
            }
            let decay = if p.decay { cfg.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut p.value).and(&*m).and(&*v).for_each(|x, &m, &v| {
                *x -= lr * ((m / c1) / ((v / c2).sqrt() + cfg.eps) + decay * *x);
            });
        }
    }

    fn write_to(&self, c: &mut ArrayContainer, bundle: &ModelBundle) {
        for (i, p) in bundle.params.iter().enumerate() {
            c.insert(format!("adam_m/{}", p.name), self.m[i].clone());
            c.insert(format!("adam_v/{}", p.name), self.v[i].clone());
        }
        c.set_meta("adam_step", self.step.to_string());
    }

    fn read_from(c: &ArrayContainer, bundle: &ModelBundle) -> Result<Self> {
        let mut out = Self::new(bundle);
        out.step = c
            .meta("adam_step")?
            .parse()
            .map_err(|e| Error::Format(format!("adam_step: {e}")))?;
        for (i, p) in bundle.params.iter().enumerate() {
            for (store, prefix) in [(&mut out.m, "adam_m"), (&mut out.v, "adam_v")] {
                let a = c.array(&format!("{prefix}/{}", p.name))?;
                if a.shape() != p.value.shape() {
                    return Err(Error::Format(format!("optimizer state for `{}` has the wrong shape", p.name)));
                }
                store[i] = a.clone();
            }
        }
        Ok(out)
    }
}

/// Loss value and per-parameter gradients of one batch, in eval mode unless
/// `train_seed` is given.
pub fn loss_and_gradients(
    bundle: &ModelBundle,
    pipe: &Pipeline,
    batch: &Batch,
    channels: &[usize],
    train_seed: Option<u64>,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let vars = bundle.params.bind(&mut tape);
    let n = batch.targets.shape()[1];
    let mut f = Fwd::new(&mut tape, &vars, train_seed.is_some(), train_seed.unwrap_or(0));
    let out = forecast(&mut f, bundle, pipe, batch, n)?;
    if let Some(e) = out.nan {
        return Err(e.to_error());
    }
    let loss = loss_var(&mut f, out.prediction, &batch.targets, &pipe.alpha, channels)?;
    let value = f.tape.value(loss)[[]];
    if !value.is_finite() {
        return Err(Error::Loss(format!("loss is {value}")));
    }
    let mut grads = tape.backward(loss);
    Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
}

/// Loss value only, without recording a backward pass.
pub fn loss_value(bundle: &ModelBundle, pipe: &Pipeline, batch: &Batch, channels: &[usize]) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars = bundle.params.bind(&mut tape);
    let n = batch.targets.shape()[1];
    let mut f = Fwd::new(&mut tape, &vars, false, 0);
    let out = forecast(&mut f, bundle, pipe, batch, n)?;
    if let Some(e) = out.nan {
        return Err(e.to_error());
    }
    let loss = loss_var(&mut f, out.prediction, &batch.targets, &pipe.alpha, channels)?;
    Ok(f.tape.value(loss)[[]])
}

/// Mean loss over a dataset, evaluated in batches.
pub fn dataset_loss(bundle: &ModelBundle, pipe: &Pipeline, ds: &Dataset, channels: &[usize], batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate the loss on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = Batch::from_dataset(ds, chunk)?;
        total += loss_value(bundle, pipe, &batch, channels)? * chunk.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// `NaN` when the step diverged.
    pub loss: f64,
    pub lr: f64,
    pub advection_lr: f64,
    pub grad_norm: f64,
    pub nan: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Stable,
    /// First non-finite loss, gradient or state; `epoch` counts from 1.
    Diverged { epoch: usize, step: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    pub outcome: Outcome,
    pub best_validation: Option<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.history.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.iter().rev().find(|r| !r.nan).map(|r| r.loss)
    }
}

pub struct TrainSetup<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub solver: SolverConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    /// Where checkpoints and `history.jsonl` go; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` in the run directory if present.
    pub resume: bool,
    /// Halt once this many epochs are done, leaving the schedule as if the
    /// run continued. Used for budgeted or interrupted runs.
    pub stop_after: Option<usize>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";

fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Reads line-delimited records written during training.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Saves the bundle with optional optimizer state and loop position.
pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, optim: Option<&AdamW>, epoch: usize) -> Result<()> {
    let mut c = bundle.to_container()?;
    if let Some(o) = optim {
        o.write_to(&mut c, bundle);
    }
    c.set_meta("epoch", epoch.to_string());
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    ModelBundle::from_container(&ArrayContainer::load(path)?)
}

fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Trains `bundle` in place.
///
/// Each epoch visits every sample once in a seeded shuffled order. Divergence
/// (a non-finite loss, gradient or rollout state) halts training and is
/// reported through [`TrainReport::outcome`], not as an error.
pub fn train(bundle: &mut ModelBundle, setup: &TrainSetup) -> Result<TrainReport> {
    setup.optim.validate()?;
    setup.solver.validate()?;
    if setup.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let channels = setup.loss.resolve(setup.train)?;
    let pipe = Pipeline::new(&setup.train.grid, setup.solver.clone())?;
    let optim = &setup.optim;
    let schedule = optim.schedule(setup.train.len());
    let per_epoch = optim.steps_per_epoch(setup.train.len());

    let mut adam = AdamW::new(bundle);
    let mut start_epoch = 0;
    let mut resumed_val: Vec<ValidationRecord> = Vec::new();
    if let Some(dir) = &setup.run_dir {
        fs::create_dir_all(dir)?;
        let last = dir.join(LAST_CHECKPOINT);
        if setup.resume && last.exists() {
            let c = ArrayContainer::load(&last)?;
            *bundle = ModelBundle::from_container(&c)?;
            adam = AdamW::read_from(&c, bundle)?;
            start_epoch = c
                .meta("epoch")?
                .parse()
                .map_err(|e| Error::Format(format!("epoch: {e}")))?;
            let val_path = dir.join(VALIDATION_FILE);
            if val_path.exists() {
                resumed_val = read_jsonl(&val_path)?;
            }
        } else {
            for name in [HISTORY_FILE, VALIDATION_FILE] {
                let p = dir.join(name);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            save_checkpoint(&dir.join(BEST_CHECKPOINT), bundle, None, 0)?;
            save_checkpoint(&last, bundle, Some(&adam), 0)?;
        }
    }

    let mut report = TrainReport {
        history: Vec::new(),
        validation: Vec::new(),
        outcome: Outcome::Stable,
        best_validation: resumed_val.iter().map(|r| r.loss).reduce(f64::min),
        steps: adam.step,
    };
    let mut epoch = start_epoch;
    let last_epoch = setup.stop_after.map_or(optim.epochs, |s| s.min(optim.epochs));
    'epochs: while epoch < last_epoch && adam.step < schedule.total {
        let order = setup.train.epoch_order(optim.seed, epoch);
        let skip = adam.step.saturating_sub(epoch * per_epoch);
        for chunk in order.chunks(optim.batch_size).skip(skip) {
            if adam.step >= schedule.total {
                break;
            }
            let step = adam.step;
            let rates = lr_schedule(&schedule, optim, step);
            let batch = Batch::from_dataset(setup.train, chunk)?;
            let seed = optim.seed.wrapping_mul(0x9E37_79B9).wrapping_add(step as u64);
            let result = loss_and_gradients(bundle, &pipe, &batch, &channels, Some(seed));
            let (loss, mut grads) = match result {
                Ok(v) => v,
                Err(Error::Integration { .. } | Error::Loss(_)) => (f64::NAN, Vec::new()),
                Err(e) => return Err(e),
            };
            let norm = grad_norm(&grads);
            let nan = !loss.is_finite() || !norm.is_finite();
            let record = StepRecord {
                step,
                epoch,
                loss,
                lr: rates.0,
                advection_lr: rates.1,
                grad_norm: norm,
                nan,
            };
            if let Some(dir) = &setup.run_dir {
                append_jsonl(&dir.join(HISTORY_FILE), &record)?;
            }
            report.history.push(record);
            if nan {
                report.outcome = Outcome::Diverged { epoch: epoch + 1, step };
                break 'epochs;
            }
            if let Some(clip) = optim.grad_clip {
                if norm > clip {
                    grads.iter_mut().flatten().for_each(|g| *g *= clip / norm);
                }
            }
            adam.update(bundle, &grads, rates, optim);
            if bundle.params.iter().any(|p| p.value.iter().any(|x| !x.is_finite())) {
                report.outcome = Outcome::Diverged { epoch: epoch + 1, step };
                break 'epochs;
            }
        }
        epoch += 1;
        if let Some(val) = setup.val.filter(|v| !v.is_empty()) {
            let loss = match dataset_loss(bundle, &pipe, val, &channels, optim.batch_size) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::Integration { .. } | Error::Loss(_)) => {
                    report.outcome = Outcome::Diverged {
                        epoch,
                        step: adam.step,
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let rec = ValidationRecord {
                epoch,
                step: adam.step,
                loss,
            };
            if let Some(dir) = &setup.run_dir {
                append_jsonl(&dir.join(VALIDATION_FILE), &rec)?;
            }
            report.validation.push(rec);
            if report.best_validation.is_none_or(|b| loss < b) {
                report.best_validation = Some(loss);
                if let Some(dir) = &setup.run_dir {
                    save_checkpoint(&dir.join(BEST_CHECKPOINT), bundle, None, epoch)?;
                }
            }
        }
        if let Some(dir) = &setup.run_dir {
            save_checkpoint(&dir.join(LAST_CHECKPOINT), bundle, Some(&adam), epoch)?;
        }
    }
    report.steps = adam.step;
    if setup.val.is_none() {
        if let Some(dir) = &setup.run_dir {
            if report.outcome == Outcome::Stable {
                save_checkpoint(&dir.join(BEST_CHECKPOINT), bundle, None, epoch)?;
            }
        }
    }
    Ok(report)
}

/// Architectures of the three learned components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchTriple {
    pub velocity: BackboneConfig,
    pub advection: BackboneConfig,
    pub source: SourceModelConfig,
}

impl ArchTriple {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.velocity.short_name(), self.advection.short_name(), self.source.short_name())
    }

    pub fn apply(&self, base: &BundleConfig) -> BundleConfig {
        let mut c = base.clone();
        c.velocity.backbone = self.velocity.clone();
        c.advection.backbone = self.advection.clone();
        c.source = self.source.clone();
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub velocity: String,
    pub advection: String,
    pub source: String,
    pub lr: f64,
    pub advection_lr: f64,
    /// `stable` or `nan`.
    pub outcome: String,
    /// Epoch (from 1) of the first non-finite value, for diverged runs.
    pub nan_epoch: Option<usize>,
    pub final_validation_loss: Option<f64>,
    /// Position among stable runs by validation loss, from 1.
    pub rank: Option<usize>,
}

/// Assigns ranks to stable runs in order of increasing validation loss.
pub fn rank_records(records: &mut [StabilityRecord]) {
    let mut stable: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].outcome == "stable" && records[i].final_validation_loss.is_some())
        .collect();
    stable.sort_by(|&a, &b| {
        let (la, lb) = (records[a].final_validation_loss.unwrap(), records[b].final_validation_loss.unwrap());
        la.total_cmp(&lb).then(a.cmp(&b))
    });
    for r in records.iter_mut() {
        r.rank = None;
    }
    for (pos, &i) in stable.iter().enumerate() {
        records[i].rank = Some(pos + 1);
    }
}

/// Trains every triple at every `(base, advection)` rate pair from the same
/// initial seed and data, and ranks the stable runs.
pub fn stability_matrix(
    base: &BundleConfig,
    triples: &[ArchTriple],
    rates: &[(f64, f64)],
    setup: &TrainSetup,
) -> Result<Vec<StabilityRecord>> {
    let runs: Vec<StabilityRun> = triples
        .iter()
        .flat_map(|t| {
            rates.iter().map(move |&(lr, advection_lr)| StabilityRun {
                triple: t.clone(),
                lr,
                advection_lr,
            })
        })
        .collect();
    stability_runs(base, &runs, setup)
}

/// One row of a stability study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    pub triple: ArchTriple,
    pub lr: f64,
    pub advection_lr: f64,
}

/// Like [`stability_matrix`] for an explicit list of runs.
pub fn stability_runs(base: &BundleConfig, runs: &[StabilityRun], setup: &TrainSetup) -> Result<Vec<StabilityRecord>> {
    let mut records = Vec::new();
    for run in runs {
        let (triple, lr, advection_lr) = (&run.triple, run.lr, run.advection_lr);
        let mut bundle = ModelBundle::new(triple.apply(base))?;
        let one = TrainSetup {
            train: setup.train,
            val: setup.val,
            solver: setup.solver.clone(),
            optim: OptimConfig {
                lr,
                advection_lr,
                ..setup.optim.clone()
            },
            loss: setup.loss.clone(),
            run_dir: None,
            resume: false,
            stop_after: setup.stop_after,
        };
        let report = train(&mut bundle, &one)?;
        let (outcome, nan_epoch) = match report.outcome {
            Outcome::Stable => ("stable", None),
            Outcome::Diverged { epoch, .. } => ("nan", Some(epoch)),
        };
        let final_validation_loss = match report.outcome {
            Outcome::Stable => report.validation.last().map(|r| r.loss).or(report.final_loss()),
            Outcome::Diverged { .. } => None,
        };
        log::info!("stability {} lr={lr} adv_lr={advection_lr}: {outcome}", triple.label());
        records.push(StabilityRecord {
            velocity: triple.velocity.short_name().into(),
            advection: triple.advection.short_name().into(),
            source: triple.source.short_name().into(),
            lr,
            advection_lr,
            outcome: outcome.into(),
            nan_epoch,
            final_validation_loss,
            rank: None,
        });
    }
    rank_records(&mut records);
    Ok(records)
}

#[cfg(test)]
mod tests;
