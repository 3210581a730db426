//! The training loop and checkpoints.
//!
//! Batches are cut from a stream that concatenates one shuffled permutation
//! of the training ids per epoch, so step `t` always covers stream positions
//! `[t·B, (t+1)·B)`. The permutations and the μ draw of every step come from
//! labelled substreams of the run seed, which makes any step reproducible
//! from the step counter alone.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::branches::{apply_stat_updates, Mode};
use crate::data::Dataset;
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::loss::{combinatory_loss, l2_gaze_loss, sample_mu, total_loss, LossBreakdown};
use crate::optim::{poly_lr, AdamState, TrainSchedule};
use crate::params::{read_entries, write_entries};
use crate::rng::substream;
use crate::tensor::{Graph, Tensor};

/// Everything the loop needs besides the model and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub nu: f64,
    pub schedule: TrainSchedule,
    pub clip_norm: Option<f64>,
    /// Seed of the data-order and μ substreams.
    pub seed: u64,
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l0: f64,
    pub l_comb: f64,
    pub l_tot: f64,
    pub nu: f64,
    pub per_subset: BTreeMap<String, f64>,
    pub mu: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub batch: Vec<usize>,
}

pub struct Trainer {
    pub model: EnsembleModel,
    pub adam: AdamState,
    settings: TrainSettings,
    train_ids: Vec<usize>,
    total_steps: u64,
    orders: BTreeMap<usize, Vec<usize>>,
}

/// Default step budget: enough batches to cover `epochs` passes.
pub fn default_total_steps(schedule: &TrainSchedule, n_train: usize) -> u64 {
    schedule
        .total_steps
        .map(|t| t as u64)
        .unwrap_or_else(|| ((n_train * schedule.epochs).div_ceil(schedule.batch_size.max(1))) as u64)
}

impl Trainer {
    pub fn new(model: EnsembleModel, settings: TrainSettings, train_ids: Vec<usize>) -> Result<Self> {
        if train_ids.is_empty() {
            return Err(Error::usage("trainer: empty training split"));
        }
        if settings.schedule.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2 (batch normalisation)"));
        }
        if !(settings.nu >= 0.0) {
            return Err(Error::config(format!("nu must be non-negative, got {}", settings.nu)));
        }
        let total_steps = default_total_steps(&settings.schedule, train_ids.len());
        let adam = AdamState::new(model.store());
        Ok(Self {
            model,
            adam,
            settings,
            train_ids,
            total_steps,
            orders: BTreeMap::new(),
        })
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn lr(&self, t: u64) -> f64 {
        let s = &self.settings.schedule;
        poly_lr(s.base_lr, s.power, t as usize, self.total_steps as usize)
    }

    fn order(&mut self, epoch: usize) -> &[usize] {
        let (ids, seed) = (&self.train_ids, self.settings.seed);
        self.orders.retain(|e, _| *e + 1 >= epoch);
        self.orders.entry(epoch).or_insert_with(|| {
            let mut o = ids.clone();
            o.shuffle(&mut substream(seed, &["data", "epoch", &epoch.to_string()]));
            o
        })
    }

    /// Dataset ids of the batch at step `t` and the epoch it starts in.
    pub fn batch_ids(&mut self, t: u64) -> (Vec<usize>, usize) {
        let b = self.settings.schedule.batch_size as u64;
        let n = self.train_ids.len() as u64;
        let start = t * b;
        let ids = (start..start + b)
            .map(|p| {
                let epoch = (p / n) as usize;
                self.order(epoch)[(p % n) as usize]
            })
            .collect();
        (ids, (start / n) as usize)
    }

    /// True when the batch of step `t` finishes an epoch.
    pub fn ends_epoch(&self, t: u64) -> bool {
        let b = self.settings.schedule.batch_size as u64;
        let n = self.train_ids.len() as u64;
        (t + 1) * b / n > t * b / n
    }

    /// Runs the optimizer step with index `self.step()`.
    pub fn train_step(&mut self, ds: &Dataset) -> Result<StepRecord> {
        let t = self.adam.step;
        self.try_step(ds, t).map_err(|e| match e {
            Error::Numeric(msg) if !msg.starts_with("step ") => Error::Numeric(format!("step {t}: {msg}")),
            e => e,
        })
    }

    fn try_step(&mut self, ds: &Dataset, t: u64) -> Result<StepRecord> {
        let (ids, epoch) = self.batch_ids(t);
        let batch = ds.batch(&ids)?;
        let nu = self.settings.nu;

        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &batch, Mode::Train)?;
        let l0 = l2_gaze_loss(&mut g, out.full.coords, &batch.targets)?;
        let subsets: Vec<Vec<usize>> = out.subsets.iter().map(|(s, _)| s.clone()).collect();
        let mut rng = substream(self.settings.seed, &["mu", &t.to_string()]);
        let mu = sample_mu(&mut rng, &subsets, t);
        let preds: Vec<(Vec<usize>, _)> = out.subsets.iter().map(|(s, d)| (s.clone(), d.coords)).collect();
        let terms = combinatory_loss(&mut g, &preds, &batch.targets, &mu)?;
        let l_tot = total_loss(&mut g, l0, terms.l_comb, nu)?;
        let breakdown = LossBreakdown::read(&g, l0, &terms, l_tot, nu)?;
        if !breakdown.l_tot.is_finite() {
            return Err(Error::Numeric(format!(
                "step {t}: non-finite loss (l0 = {}, l_comb = {})",
                breakdown.l0, breakdown.l_comb
            )));
        }
        g.backward(l_tot)?;

        let store = self.model.store();
        let mut sq = 0.0;
        for id in store.trainable_ids() {
            if let Some(gr) = g.param_grad(id) {
                sq += gr.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("step {t}: non-finite gradient")));
        }
        let scale = match self.settings.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = self.lr(t);
        self.adam
            .step(self.model.store_mut(), |id| g.param_grad(id), lr, scale)?;
        apply_stat_updates(self.model.store_mut(), &out.stat_updates);

        Ok(StepRecord {
            step: t,
            epoch,
            lr,
            l0: breakdown.l0,
            l_comb: breakdown.l_comb,
            l_tot: breakdown.l_tot,
            nu,
            per_subset: breakdown.per_subset,
            mu: mu.to_map(),
            grad_norm,
            batch: ids,
        })
    }

    /// Trains until `until` steps have been taken (capped at the schedule
    /// length), handing each record to `on_step`.
    pub fn run(
        &mut self,
        ds: &Dataset,
        until: u64,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.total_steps);
        while self.adam.step < until {
            let rec = self.train_step(ds)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    /// Writes parameters, buffers and optimizer state.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let store = self.model.store();
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for (k, id) in self.adam.ids.iter().enumerate() {
            let name = store.name(*id);
            owned.push((format!("adam/m/{name}"), self.adam.m[k].clone()));
            owned.push((format!("adam/v/{name}"), self.adam.v[k].clone()));
        }
        owned.push(("adam/step".into(), Tensor::scalar(self.adam.step as f64)));
        let entries = store
            .iter()
            .map(|(_, p)| (p.name.as_str(), &p.tensor))
            .chain(owned.iter().map(|(n, t)| (n.as_str(), t)));
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        write_entries(path, entries)
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`] for the
    /// same architecture.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = read_entries(path)?;
        let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
        let mismatch = |msg: String| Error::format(path, format!("architecture mismatch: {msg}"));
        let names: Vec<String> = self.model.store().iter().map(|(_, p)| p.name.clone()).collect();
        let mut restored = Vec::with_capacity(names.len());
        for name in &names {
            let t = map
                .remove(name)
                .ok_or_else(|| mismatch(format!("checkpoint has no {name}")))?;
            let id = self.model.store().id(name).expect("own name");
            if t.shape() != self.model.store().tensor(id).shape() {
                return Err(mismatch(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.model.store().tensor(id).shape()
                )));
            }
            restored.push((id, t));
        }
        let mut adam = AdamState::new(self.model.store());
        for (k, id) in adam.ids.clone().iter().enumerate() {
            let name = self.model.store().name(*id).to_string();
            for (prefix, slot) in [("m", &mut adam.m[k]), ("v", &mut adam.v[k])] {
                let key = format!("adam/{prefix}/{name}");
                let t = map
                    .remove(&key)
                    .ok_or_else(|| Error::format(path, format!("missing optimizer entry {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::format(path, format!("{key} has the wrong shape")));
                }
                *slot = t;
            }
        }
        let step = map
            .remove("adam/step")
            .ok_or_else(|| Error::format(path, "missing adam/step"))?
            .item()?;
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::format(path, format!("invalid step counter {step}")));
        }
        if let Some(extra) = map.keys().next() {
            return Err(mismatch(format!("unexpected entry {extra}")));
        }
        adam.step = step as u64;
        for (id, t) in restored {
            *self.model.store_mut().tensor_mut(id) = t;
        }
        self.adam = adam;
        self.orders.clear();
        Ok(())
    }

    pub fn into_model(self) -> EnsembleModel {
        self.model
    }
}

/// Loads only the model parameters and buffers of a checkpoint (optimizer
/// entries are ignored), for evaluation.
pub fn load_weights(model: &mut EnsembleModel, path: &Path) -> Result<()> {
    let mut map: BTreeMap<String, Tensor> = read_entries(path)?.into_iter().collect();
    let names: Vec<String> = model.store().iter().map(|(_, p)| p.name.clone()).collect();
    for name in &names {
        let t = map
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("architecture mismatch: checkpoint has no {name}")))?;
        let id = model.store().id(name).expect("own name");
        if t.shape() != model.store().tensor(id).shape() {
            return Err(Error::format(
                path,
                format!("architecture mismatch: {name} has shape {:?}", t.shape()),
            ));
        }
        *model.store_mut().tensor_mut(id) = t;
    }
    if let Some(extra) = map.keys().find(|k| !k.starts_with("adam/")) {
        return Err(Error::format(path, format!("architecture mismatch: unexpected entry {extra}")));
    }
    Ok(())
}

/// Appends step records as JSON lines.
pub struct StepLog {
    out: BufWriter<File>,
}

impl StepLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Where [`fit`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct FitOutputs {
    /// JSON-lines step log.
    pub log: Option<PathBuf>,
    /// Directory for `epoch{k:03}.ckpt` and `final.ckpt`.
    pub checkpoints: Option<PathBuf>,
}

/// Trains `model` on `train_ids` for the full schedule.
pub fn fit(
    model: EnsembleModel,
    ds: &Dataset,
    train_ids: &[usize],
    settings: &TrainSettings,
    outputs: &FitOutputs,
) -> Result<(Trainer, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(model, settings.clone(), train_ids.to_vec())?;
    let mut log = outputs.log.as_deref().map(StepLog::create).transpose()?;
    if let Some(dir) = &outputs.checkpoints {
        fs::create_dir_all(dir)?;
    }
    let mut records = Vec::new();
    let total = trainer.total_steps();
    trainer.run(ds, total, |tr, rec| {
        if let Some(l) = log.as_mut() {
            l.write(rec)?;
        }
        if let Some(dir) = &outputs.checkpoints {
            if tr.ends_epoch(rec.step) {
                let epoch = ((rec.step + 1) * tr.settings.schedule.batch_size as u64) / tr.train_ids.len() as u64;
                tr.save_checkpoint(&dir.join(format!("epoch{epoch:03}.ckpt")))?;
            }
        }
        records.push(rec.clone());
        Ok(())
    })?;
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    if let Some(dir) = &outputs.checkpoints {
        trainer.save_checkpoint(&dir.join("final.ckpt"))?;
    }
    Ok((trainer, records))
}
