//! Adversarial training for every model variant.
//!
//! One iteration updates the critics on detached generator outputs, then
//! the generators on the weighted objective. Sample order, augmentation and
//! image-pool draws derive from `(seed, epoch, position)`, so a run resumed
//! from a mid-epoch checkpoint replays the exact same iterations.

mod pool;
mod variant;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use pool::ImagePool;
pub use variant::{variant_wiring, GeneratorKind, Variant, Wiring};

use crate::critics::{conditional_input, Discriminator, DiscriminatorSpec};
use crate::data::{images_to_tensor, masks_to_tensor, rotate, Image, Mask, Rotation, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, generator_adversarial_loss, l1, segmentation_loss, LossTerms, LossWeights,
};
use crate::metgen::{Generator, GeneratorSpec};
use crate::metrics::mean;
use crate::nn::{Adam, AdamConfig, Checkpoint};
use crate::rng::derive_rng;
use crate::segmentor::Segmentor;

pub const TRAIN_STATE_KIND: &str = "train-state";
const TAG_ORDER: u64 = 1;
const TAG_STEP: u64 = 2;
const TAG_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    /// Last epoch at the initial learning rate.
    pub decay_start: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// `None` takes the variant's defaults.
    pub weights: Option<LossWeights>,
    pub seed: u64,
    pub label_shuffle_fraction: f64,
    /// Epoch interval between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Critic replay buffer size; 0 disables it.
    pub image_pool: usize,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    /// Random right-angle rotations of each training triple.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MetGan,
            epochs: 200,
            decay_start: 100,
            batch_size: 1,
            adam: AdamConfig::default(),
            weights: None,
            seed: 0,
            label_shuffle_fraction: 0.0,
            checkpoint_every: 0,
            image_pool: 0,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        self.weights.unwrap_or_else(|| self.variant.default_weights())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_shuffle_fraction) {
            return Err(Error::config("label_shuffle_fraction must lie in [0, 1]"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        self.weights().validate()?;
        self.generator.validate()?;
        self.discriminator.validate()
    }
}

/// Learning rate scheduled for 1-based `epoch`: constant through
/// `decay_start`, then linear to zero at the final epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > config.epochs {
        return Err(Error::config(format!(
            "epoch {epoch} outside 1..={}",
            config.epochs
        )));
    }
    let lr0 = config.adam.lr;
    if epoch <= config.decay_start {
        return Ok(lr0);
    }
    let span = (config.epochs - config.decay_start) as f64;
    Ok(lr0 * (config.epochs - epoch) as f64 / span)
}

/// Learning rate actually used for updates: the scheduled value, except
/// that a scheduled zero at the final epoch reuses the previous epoch's.
pub fn applied_lr(epoch: usize, config: &TrainConfig) -> Result<f64> {
    let lr = lr_at(epoch, config)?;
    if lr == 0.0 && epoch > 1 {
        return lr_at(epoch - 1, config);
    }
    Ok(lr)
}

/// Label corruption: `(target index, source index)` for every sample whose
/// label was replaced by another sample's.
pub fn shuffle_plan(n: usize, fraction: f64, seed: u64) -> Vec<(usize, usize)> {
    let k = (fraction * n as f64).floor() as usize;
    if k == 0 || n < 2 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[TAG_SHUFFLE]));
    if k == 1 {
        return vec![(order[0], order[1])];
    }
    (0..k).map(|i| (order[i], order[(i + 1) % k])).collect()
}

/// One training iteration as logged. `losses` holds only the terms the
/// variant uses, plus `l_final`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
}

impl IterationLog {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.losses.get(key).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr_scheduled: f64,
    pub lr_applied: f64,
    pub iterations: usize,
    pub mean_losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub path: Option<PathBuf>,
    pub id: String,
    pub segmentor_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub shuffled_labels: Vec<(String, String)>,
}

/// Networks a trainer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub generators: usize,
    pub critics: usize,
    pub segmentor: bool,
    pub trainable_scalars: usize,
}

struct Step {
    f: Generator,
    g: Option<Generator>,
    d_y: Discriminator,
    d_x: Option<Discriminator>,
}

pub struct Trainer {
    config: TrainConfig,
    wiring: Wiring,
    weights: LossWeights,
    nets: Step,
    seg: Option<Segmentor>,
    opt_g: Adam,
    opt_d: Adam,
    pool_y: ImagePool,
    pool_x: ImagePool,
    samples: Vec<Sample>,
    labels: Vec<Mask>,
    shuffled: Vec<(usize, usize)>,
    fingerprint: String,
    epoch: usize,
    position: usize,
    iteration: u64,
    history: Vec<IterationLog>,
    epoch_summaries: Vec<EpochSummary>,
    output: Option<PathBuf>,
}

fn prefixed(prefix: &str, vars: Vec<(String, Var)>) -> impl Iterator<Item = (String, Var)> + '_ {
    vars.into_iter().map(move |(n, v)| (format!("{prefix}{n}"), v))
}

fn dataset_fingerprint(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        for v in s.anatomy.iter().chain(s.tumour.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update(s.label.iter().copied().collect::<Vec<u8>>());
    }
    hex::encode(h.finalize())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &[Sample], segmentor: Option<Segmentor>) -> Result<Self> {
        config.validate()?;
        let wiring = variant_wiring(config.variant);
        let seg = if wiring.segmentation_loss {
            let seg = segmentor.ok_or_else(|| {
                Error::config(format!("{} needs a pretrained segmentor", config.variant))
            })?;
            if !seg.is_frozen() {
                return Err(Error::SegmentorNotFrozen);
            }
            Some(seg)
        } else {
            None
        };
        if dataset.is_empty() {
            return Err(Error::config("cannot train on an empty dataset"));
        }
        let size = config.generator.image_size;
        if let Some(s) = dataset.iter().find(|s| s.dim() != (size, size)) {
            return Err(Error::shape(format!(
                "sample {} is {:?}, generator expects {size}×{size}",
                s.id,
                s.dim()
            )));
        }
        let gspec = match wiring.generator {
            GeneratorKind::MetGen => config.generator.clone(),
            GeneratorKind::PlainUNet => config.generator.clone().plain_unet(),
        };
        let dspec = DiscriminatorSpec {
            conditional: wiring.conditional_critic,
            ..config.discriminator.clone()
        };
        let seed = config.seed;
        let nets = Step {
            f: Generator::new(gspec.clone(), seed.wrapping_add(1))?,
            g: wiring.cycle.then(|| Generator::new(gspec, seed.wrapping_add(2))).transpose()?,
            d_y: Discriminator::new(dspec.clone(), seed.wrapping_add(3))?,
            d_x: wiring.cycle.then(|| Discriminator::new(dspec, seed.wrapping_add(4))).transpose()?,
        };
        let shuffled = shuffle_plan(dataset.len(), config.label_shuffle_fraction, seed);
        let mut labels: Vec<Mask> = dataset.iter().map(|s| s.label.clone()).collect();
        for &(t, s) in &shuffled {
            labels[t] = dataset[s].label.clone();
        }
        let (opt_g, opt_d) = Self::optimizers(&nets, &config.adam)?;
        Ok(Self {
            weights: config.weights(),
            pool_y: ImagePool::new(config.image_pool),
            pool_x: ImagePool::new(config.image_pool),
            config,
            wiring,
            nets,
            seg,
            opt_g,
            opt_d,
            fingerprint: dataset_fingerprint(dataset),
            samples: dataset.to_vec(),
            labels,
            shuffled,
            epoch: 1,
            position: 0,
            iteration: 0,
            history: Vec::new(),
            epoch_summaries: Vec::new(),
            output: None,
        })
    }

    fn optimizers(nets: &Step, adam: &AdamConfig) -> Result<(Adam, Adam)> {
        let mut gv: Vec<(String, Var)> = prefixed("F.", nets.f.params().vars()).collect();
        if let Some(g) = &nets.g {
            gv.extend(prefixed("G.", g.params().vars()));
        }
        let mut dv: Vec<(String, Var)> = prefixed("DY.", nets.d_y.params().vars()).collect();
        if let Some(d) = &nets.d_x {
            dv.extend(prefixed("DX.", d.params().vars()));
        }
        Ok((Adam::new(gv, *adam)?, Adam::new(dv, *adam)?))
    }

    /// Directory receiving the loss log, checkpoints and diagnostics.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn wiring(&self) -> Wiring {
        self.wiring
    }

    /// The anatomy→tumour generator.
    pub fn generator(&self) -> &Generator {
        &self.nets.f
    }

    /// The tumour→anatomy generator of cyclic variants.
    pub fn inverse_generator(&self) -> Option<&Generator> {
        self.nets.g.as_ref()
    }

    pub fn segmentor(&self) -> Option<&Segmentor> {
        self.seg.as_ref()
    }

    pub fn census(&self) -> Census {
        let mut scalars = self.nets.f.params().num_scalars() + self.nets.d_y.params().num_scalars();
        scalars += self.nets.g.as_ref().map_or(0, |g| g.params().num_scalars());
        scalars += self.nets.d_x.as_ref().map_or(0, |d| d.params().num_scalars());
        Census {
            generators: 1 + usize::from(self.nets.g.is_some()),
            critics: 1 + usize::from(self.nets.d_x.is_some()),
            segmentor: self.seg.is_some(),
            trainable_scalars: scalars,
        }
    }

    pub fn history(&self) -> &[IterationLog] {
        &self.history
    }

    pub fn epoch_summaries(&self) -> &[EpochSummary] {
        &self.epoch_summaries
    }

    /// `(target id, source id)` of every corrupted label.
    pub fn shuffled_labels(&self) -> Vec<(String, String)> {
        self.shuffled
            .iter()
            .map(|&(t, s)| (self.samples[t].id.clone(), self.samples[s].id.clone()))
            .collect()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.epoch > self.config.epochs
    }

    fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.config.batch_size)
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut derive_rng(self.config.seed, &[TAG_ORDER, epoch as u64]));
        order
    }

    /// Runs one iteration; `None` once every epoch is done.
    pub fn step(&mut self) -> Result<Option<IterationLog>> {
        if self.is_finished() {
            return Ok(None);
        }
        let order = self.epoch_order(self.epoch);
        let bs = self.config.batch_size;
        let idx: Vec<usize> = order.iter().copied().skip(self.position * bs).take(bs).collect();
        let lr = applied_lr(self.epoch, &self.config)?;
        let mut rng = derive_rng(self.config.seed, &[TAG_STEP, self.epoch as u64, self.position as u64]);
        let mut xs = Vec::with_capacity(idx.len());
        let mut ys = Vec::with_capacity(idx.len());
        let mut ls = Vec::with_capacity(idx.len());
        for &i in &idx {
            let rot = if self.config.augment {
                Rotation::random(&mut rng)
            } else {
                Rotation::R0
            };
            xs.push(rotate(&self.samples[i].anatomy, rot));
            ys.push(rotate(&self.samples[i].tumour, rot));
            ls.push(rotate(&self.labels[i], rot));
        }
        let log = match self.iterate(&xs, &ys, &ls, lr, &mut rng) {
            Ok(log) => log,
            Err(e @ Error::NonFinite { .. }) => {
                self.write_diagnostic()?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        self.iteration += 1;
        self.position += 1;
        self.append_log(&log)?;
        self.history.push(log.clone());
        if self.position == self.batches_per_epoch() {
            self.finish_epoch()?;
        }
        Ok(Some(log))
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch;
        let rows: Vec<&IterationLog> = self.history.iter().filter(|l| l.epoch == epoch).collect();
        let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            for (k, v) in &r.losses {
                sums.entry(k.clone()).or_default().push(*v);
            }
        }
        self.epoch_summaries.push(EpochSummary {
            epoch,
            lr_scheduled: lr_at(epoch, &self.config)?,
            lr_applied: applied_lr(epoch, &self.config)?,
            iterations: rows.len(),
            mean_losses: sums.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
        });
        self.epoch += 1;
        self.position = 0;
        Ok(())
    }

    fn iterate(
        &mut self,
        xs: &[Image],
        ys: &[Image],
        ls: &[Mask],
        lr: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<IterationLog> {
        let dev = Device::Cpu;
        let x = images_to_tensor(&xs.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
        let y = images_to_tensor(&ys.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
        let l = masks_to_tensor(&ls.iter().collect::<Vec<_>>(), DType::F32, &dev)?;
        let w = &self.wiring;
        let obj = self.weights.adversarial_objective;
        let nets = &self.nets;
        let critic_in = |out: &Tensor, src: &Tensor| -> Result<Tensor> {
            if w.conditional_critic {
                conditional_input(out, src)
            } else {
                Ok(out.clone())
            }
        };
        let mut logged = BTreeMap::new();

        // critics
        let fake_y = nets.f.forward(&x, &l)?;
        let fake_x = nets.g.as_ref().map(|g| g.forward(&y, &l)).transpose()?;
        let pooled_y = self.pool_y.query(&fake_y.detach(), rng)?;
        let d_y_loss = discriminator_loss(
            &nets.d_y.patch_scores(&critic_in(&y, &x)?)?,
            &nets.d_y.patch_scores(&critic_in(&pooled_y, &x)?)?,
            obj,
        )?;
        logged.insert("d_y".to_owned(), scalar(&d_y_loss)?);
        let mut d_total = d_y_loss;
        if let (Some(d_x), Some(fx)) = (&nets.d_x, &fake_x) {
            let pooled_x = self.pool_x.query(&fx.detach(), rng)?;
            let d_x_loss = discriminator_loss(
                &d_x.patch_scores(&critic_in(&x, &y)?)?,
                &d_x.patch_scores(&critic_in(&pooled_x, &y)?)?,
                obj,
            )?;
            logged.insert("d_x".to_owned(), scalar(&d_x_loss)?);
            d_total = (d_total + d_x_loss)?;
        }
        for (k, v) in &logged {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: k.clone() });
            }
        }
        self.opt_d.step(&d_total.backward()?, lr)?;

        // generators
        let mut terms = LossTerms::default();
        let adv_y = generator_adversarial_loss(&nets.d_y.patch_scores(&critic_in(&fake_y, &x)?)?, obj)?;
        logged.insert("adv_y".to_owned(), scalar(&adv_y)?);
        let mut adv = adv_y;
        if let (Some(d_x), Some(fx)) = (&nets.d_x, &fake_x) {
            let adv_x = generator_adversarial_loss(&d_x.patch_scores(&critic_in(fx, &y)?)?, obj)?;
            logged.insert("adv_x".to_owned(), scalar(&adv_x)?);
            adv = (adv + adv_x)?;
        }
        terms.l_d = Some(adv);
        if w.cycle_loss {
            if let (Some(g), Some(fx)) = (&nets.g, &fake_x) {
                let anatomy = l1(&g.forward(&fake_y, &l)?, &x)?;
                let tumour = l1(&nets.f.forward(fx, &l)?, &y)?;
                logged.insert("cycle_anatomy".to_owned(), scalar(&anatomy)?);
                logged.insert("cycle_tumour".to_owned(), scalar(&tumour)?);
                terms.l_cycle = Some((anatomy + tumour)?);
            }
        }
        if w.segmentation_loss {
            let seg = self.seg.as_ref().ok_or(Error::SegmentorNotFrozen)?;
            terms.l_segm = Some(segmentation_loss(seg, &fake_y, &l)?);
        }
        if w.pair_loss {
            let tumour = l1(&fake_y, &y)?;
            logged.insert("pair_tumour".to_owned(), scalar(&tumour)?);
            let mut pair = tumour;
            if let Some(fx) = &fake_x {
                let anatomy = l1(fx, &x)?;
                logged.insert("pair_anatomy".to_owned(), scalar(&anatomy)?);
                pair = (pair + anatomy)?;
            }
            terms.l_pair = Some(pair);
        }
        let report = terms.report(&self.weights)?;
        logged.insert("l_d".to_owned(), report.l_d);
        if terms.l_cycle.is_some() {
            logged.insert("l_cycle".to_owned(), report.l_cycle);
        }
        if terms.l_segm.is_some() {
            logged.insert("l_segm".to_owned(), report.l_segm);
        }
        if terms.l_pair.is_some() {
            logged.insert("l_pair".to_owned(), report.l_pair);
        }
        logged.insert("l_final".to_owned(), report.l_final);
        if let Some(total) = terms.compose(&self.weights)? {
            self.opt_g.step(&total.backward()?, lr)?;
        }
        Ok(IterationLog {
            epoch: self.epoch,
            iteration: self.iteration + 1,
            lr,
            losses: logged,
        })
    }

    fn append_log(&self, log: &IterationLog) -> Result<()> {
        let Some(dir) = &self.output else { return Ok(()) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("train_log.jsonl");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(log)?).map_err(|e| Error::io(&path, e))
    }

    fn write_diagnostic(&self) -> Result<()> {
        let Some(dir) = &self.output else { return Ok(()) };
        let mut ck = self.state_checkpoint()?;
        ck.extra["diagnostic"] = serde_json::json!(format!(
            "non-finite loss at epoch {} iteration {}",
            self.epoch,
            self.iteration + 1
        ));
        ck.save(&dir.join("diagnostic.safetensors"))
    }

    /// Runs `n` iterations or until training ends.
    pub fn run_steps(&mut self, n: usize) -> Result<usize> {
        let mut done = 0;
        while done < n && self.step()?.is_some() {
            done += 1;
        }
        Ok(done)
    }

    /// Trains to completion, checkpointing every `checkpoint_every` epochs
    /// and after the last one.
    pub fn train(&mut self) -> Result<TrainSummary> {
        let mut checkpoints = Vec::new();
        while !self.is_finished() {
            let epoch = self.epoch;
            while self.epoch == epoch {
                self.step()?;
            }
            let every = self.config.checkpoint_every;
            if (every > 0 && epoch % every == 0) || self.is_finished() {
                checkpoints.push(self.record_checkpoint(epoch)?);
            }
        }
        Ok(TrainSummary {
            variant: self.config.variant,
            epochs: self.epoch_summaries.clone(),
            checkpoints,
            shuffled_labels: self.shuffled_labels(),
        })
    }

    fn record_checkpoint(&self, epoch: usize) -> Result<CheckpointRecord> {
        let ck = self.state_checkpoint()?;
        let path = match &self.output {
            Some(dir) => {
                let p = dir.join("checkpoints").join(format!("epoch_{epoch:04}.safetensors"));
                ck.save(&p)?;
                Some(p)
            }
            None => None,
        };
        Ok(CheckpointRecord {
            epoch,
            path,
            id: ck.id()?,
            segmentor_checksum: self.seg.as_ref().map(|s| s.checksum()).transpose()?,
        })
    }

    /// Complete training state: parameters, optimizer moments, pools,
    /// progress counters and the loss history.
    pub fn state_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(TRAIN_STATE_KIND, self.config.seed, serde_json::to_value(&self.config)?)
            .with_tensors("F.", self.nets.f.params().tensors())
            .with_tensors("DY.", self.nets.d_y.params().tensors())
            .with_tensors("optG.", self.opt_g.state())
            .with_tensors("optD.", self.opt_d.state());
        if let Some(g) = &self.nets.g {
            ck = ck.with_tensors("G.", g.params().tensors());
        }
        if let Some(d) = &self.nets.d_x {
            ck = ck.with_tensors("DX.", d.params().tensors());
        }
        for (tag, pool) in [("poolY.", &self.pool_y), ("poolX.", &self.pool_x)] {
            let map = pool
                .images()
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("{i:04}"), t.clone()))
                .collect();
            ck = ck.with_tensors(tag, map);
        }
        ck.extra = serde_json::json!({
            "epoch": self.epoch,
            "position": self.position,
            "iteration": self.iteration,
            "opt_g_steps": self.opt_g.step_count(),
            "opt_d_steps": self.opt_d.step_count(),
            "dataset_fingerprint": self.fingerprint,
            "segmentor_checksum": self.seg.as_ref().map(|s| s.checksum()).transpose()?,
            "history": self.history,
            "epoch_summaries": self.epoch_summaries,
        });
        Ok(ck)
    }

    /// Rebuilds a trainer from [`Trainer::state_checkpoint`] output. The
    /// dataset and segmentor must be the ones the run started with.
    pub fn resume(ck: &Checkpoint, dataset: &[Sample], segmentor: Option<Segmentor>) -> Result<Self> {
        ck.expect_kind(TRAIN_STATE_KIND)?;
        let config: TrainConfig = serde_json::from_value(ck.spec.clone())?;
        let mut t = Self::new(config, dataset, segmentor)?;
        let extra = &ck.extra;
        let field = |k: &str| {
            extra
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("train state lacks `{k}`")))
        };
        if field("dataset_fingerprint")?.as_str() != Some(t.fingerprint.as_str()) {
            return Err(Error::Checkpoint("dataset differs from the one the run started with".into()));
        }
        let seg_sum = t.seg.as_ref().map(|s| s.checksum()).transpose()?;
        if serde_json::to_value(&seg_sum)? != *field("segmentor_checksum")? {
            return Err(Error::Checkpoint("segmentor differs from the one the run started with".into()));
        }
        let dev = Device::Cpu;
        let spec_f = t.nets.f.spec().clone();
        let seed = t.config.seed;
        t.nets.f = Generator::from_parts(spec_f, seed.wrapping_add(1), ck.tensors_with_prefix("F."), &dev)?;
        if let Some(g) = &t.nets.g {
            let spec = g.spec().clone();
            t.nets.g = Some(Generator::from_parts(spec, seed.wrapping_add(2), ck.tensors_with_prefix("G."), &dev)?);
        }
        let dspec = t.nets.d_y.spec().clone();
        t.nets.d_y = Discriminator::from_parts(dspec.clone(), seed.wrapping_add(3), ck.tensors_with_prefix("DY."), &dev)?;
        if t.nets.d_x.is_some() {
            t.nets.d_x = Some(Discriminator::from_parts(dspec, seed.wrapping_add(4), ck.tensors_with_prefix("DX."), &dev)?);
        }
        let (mut opt_g, mut opt_d) = Self::optimizers(&t.nets, &t.config.adam)?;
        let steps = |k: &str| -> Result<u64> {
            field(k)?
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("`{k}` is not a count")))
        };
        opt_g.load_state(&ck.tensors_with_prefix("optG."), steps("opt_g_steps")?)?;
        opt_d.load_state(&ck.tensors_with_prefix("optD."), steps("opt_d_steps")?)?;
        t.opt_g = opt_g;
        t.opt_d = opt_d;
        let cap = t.config.image_pool;
        t.pool_y = ImagePool::restore(cap, ck.tensors_with_prefix("poolY.").into_values().collect());
        t.pool_x = ImagePool::restore(cap, ck.tensors_with_prefix("poolX.").into_values().collect());
        t.epoch = steps("epoch")? as usize;
        t.position = steps("position")? as usize;
        t.iteration = steps("iteration")?;
        t.history = serde_json::from_value(field("history")?.clone())?;
        t.epoch_summaries = serde_json::from_value(field("epoch_summaries")?.clone())?;
        Ok(t)
    }
}

/// Loads a train-state checkpoint's anatomy→tumour generator.
pub fn generator_from_state(ck: &Checkpoint, device: &Device) -> Result<Generator> {
    ck.expect_kind(TRAIN_STATE_KIND)?;
    let config: TrainConfig = serde_json::from_value(ck.spec.clone())?;
    let spec = match variant_wiring(config.variant).generator {
        GeneratorKind::MetGen => config.generator.clone(),
        GeneratorKind::PlainUNet => config.generator.clone().plain_unet(),
    };
    Generator::from_parts(spec, config.seed.wrapping_add(1), ck.tensors_with_prefix("F."), device)
}

/// Writes a training summary as pretty JSON.
pub fn write_summary(path: &Path, summary: &TrainSummary) -> Result<()> {
    let body = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
