//! Optimizer, learning-rate schedule, and the pretrain → warm-up → train
//! pipeline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::Duration;
use log::info;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PreparedData;
use crate::data::{
    compute_pretrain_targets, make_training_samples, PretrainTargets, SeriesDataset, Split,
};
use crate::error::{Error, Result};
use crate::models::dert::WarmupBatch;
use crate::models::encoder::{EncoderModel, PretrainBatch};
use crate::models::{embedding_matrix, ModelBundle, ModelConfig};
use crate::numerics::{Checkpoint, ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::scheduler::TrainBatch;

// ---------------------------------------------------------------- optimizer

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One AdamW update of `param` in place. `t` is the 1-based step count.
///
/// Decay is decoupled: `p ← p·(1 − lr·λ)` before the Adam step.
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(Error::Domain(format!(
            "parameter of {} values with {} gradients",
            param.len(),
            grad.len()
        )));
    }
    if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient {bad}")));
    }
    let (b1, b2) = (T::of(ADAM_BETAS.0), T::of(ADAM_BETAS.1));
    let c1 = T::one() - b1.powi(t as i32);
    let c2 = T::one() - b2.powi(t as i32);
    let decay = T::one() - T::of(lr * weight_decay);
    let lr = T::of(lr);
    let eps = T::of(ADAM_EPS);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] = param[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over every parameter of a store, honouring per-parameter rate
/// multipliers.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    state: Vec<Moments<T>>,
    t: u64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        Self {
            state: store
                .iter()
                .map(|(_, p)| Moments::zeros(p.value.len()))
                .collect(),
            t: 0,
            weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.state.len() != store.len() {
            return Err(Error::Domain(
                "optimizer built for a different parameter set".into(),
            ));
        }
        for (_, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient in {}",
                    p.name
                )));
            }
        }
        self.t += 1;
        for (id, p) in store.iter_mut() {
            let rate = lr * p.lr_scale;
            adamw_step(
                p.value.data_mut(),
                p.grad.data(),
                &mut self.state[id.index()],
                self.t,
                rate,
                self.weight_decay,
            )?;
        }
        Ok(())
    }
}

// ----------------------------------------------------------------- schedule

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneCycle {
    pub max_lr: f64,
    /// Fraction of the steps spent rising.
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            max_lr: 1e-3,
            pct_start: 0.4,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

fn cos_between(start: f64, end: f64, frac: f64) -> f64 {
    let c = (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos();
    start * (1.0 + c) / 2.0 + end * (1.0 - c) / 2.0
}

/// Learning rate at `step` of `total_steps`.
///
/// Cosine rise from `max/div` to `max` until `pct_start·T`, cosine fall back
/// to `max/div` until 90% of the way through the remainder, then a cosine
/// tail to `max/(div·final_div)` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &OneCycle) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config(
            "one-cycle schedule needs at least one step".into(),
        ));
    }
    if step >= total_steps {
        return Err(Error::Config(format!(
            "step {step} outside schedule of {total_steps}"
        )));
    }
    let initial = cfg.max_lr / cfg.div_factor;
    let last = initial / cfg.final_div_factor;
    let t = step as f64;
    let total = total_steps as f64;
    let p1 = cfg.pct_start * total;
    let p2 = p1 + 0.9 * (total - p1);
    let end = total - 1.0;
    Ok(if t <= p1 {
        cos_between(initial, cfg.max_lr, if p1 > 0.0 { t / p1 } else { 1.0 })
    } else if t <= p2 {
        cos_between(cfg.max_lr, initial, (t - p1) / (p2 - p1))
    } else {
        cos_between(
            initial,
            last,
            if end > p2 { (t - p2) / (end - p2) } else { 1.0 },
        )
    })
}

// ------------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageFlags {
    pub pretrain: bool,
    pub warmup: bool,
}

impl Default for StageFlags {
    fn default() -> Self {
        Self {
            pretrain: true,
            warmup: false,
        }
    }
}

impl StageFlags {
    /// `"11"`, `"10"`, `"01"` or `"00"`.
    pub fn variant(&self) -> String {
        format!("{}{}", self.pretrain as u8, self.warmup as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Seeds dropout masks and batch order from `seed`; otherwise they come
    /// from the OS.
    pub deterministic: bool,
    pub stages: StageFlags,
    pub model: ModelConfig,
    pub schedule: OneCycle,
    pub weight_decay: f64,
    pub pretrain_batch: usize,
    pub batch: usize,
    pub epochs: usize,
    pub pretrain_epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub train_epochs: Option<usize>,
    /// Rate multiplier for pretrained parameters in the train stage.
    pub fine_tune: f64,
    /// Validation epochs without improvement before a stage stops.
    pub patience: usize,
    /// Training lookback in days (the target is the next day).
    pub lookback: usize,
    /// Use this encoder checkpoint instead of pretraining in-line.
    pub encoder_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            stages: StageFlags::default(),
            model: ModelConfig::default(),
            schedule: OneCycle::default(),
            weight_decay: 7e-4,
            pretrain_batch: 8192,
            batch: 32,
            epochs: 100,
            pretrain_epochs: None,
            warmup_epochs: None,
            train_epochs: None,
            fine_tune: 0.1,
            patience: 10,
            lookback: 7,
            encoder_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 || self.pretrain_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.lookback == 0 {
            return Err(Error::Config("lookback must be positive".into()));
        }
        let s = &self.schedule;
        if !(s.max_lr > 0.0)
            || !(0.0..=1.0).contains(&s.pct_start)
            || !(s.div_factor > 0.0)
            || !(s.final_div_factor > 0.0)
        {
            return Err(Error::Config(format!("invalid one-cycle settings {s:?}")));
        }
        if !(self.fine_tune >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "fine_tune and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn stage_epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.pretrain_epochs,
            Stage::Warmup => self.warmup_epochs,
            Stage::Train => self.train_epochs,
        }
        .unwrap_or(self.epochs)
    }
}

// ---------------------------------------------------------------------- log

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Warmup,
    Train,
}

/// One line of the training log. `split` is `train` for optimizer steps,
/// `val` for end-of-epoch validation, and `untrained` for the loss of a fresh
/// encoder before pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub split: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn losses(&self, stage: Stage, split: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.split == split)
            .map(|r| r.loss)
            .collect()
    }

    pub fn best_val(&self, stage: Stage) -> Option<f64> {
        self.losses(stage, "val").into_iter().reduce(f64::min)
    }
}

// --------------------------------------------------------------- batch prep

/// Embeddings for every dataset day plus the window padding, so dataset day
/// `i` sits at row `i + preday`.
#[derive(Debug, Clone)]
pub struct DatasetEmbeddings<T> {
    pub matrix: Tensor<T>,
    pub offset: usize,
}

impl<T: Scalar> DatasetEmbeddings<T> {
    pub fn new(data: &PreparedData, config: &ModelConfig) -> Result<Self> {
        let ds = &data.dataset;
        let start = ds
            .start_date()
            .ok_or_else(|| Error::Pipeline("dataset is empty".into()))?;
        let matrix = embedding_matrix(
            &data.tables,
            &ds.region,
            start - Duration::days(config.preday as i64),
            ds.len() + config.preday + config.postday,
        )?;
        Ok(Self {
            matrix,
            offset: config.preday,
        })
    }
}

fn rows_tensor<T: Scalar>(
    dataset: &SeriesDataset,
    days: impl Iterator<Item = usize>,
) -> Result<Tensor<T>> {
    let n = dataset.n_variates();
    let data: Vec<T> = days
        .flat_map(|d| dataset.day_values(d).iter().map(|&v| T::of(v)))
        .collect();
    let rows = data.len() / n;
    Tensor::matrix(rows, n, data)
}

pub fn pretrain_batch<T: Scalar>(
    emb: &DatasetEmbeddings<T>,
    targets: &PretrainTargets,
    days: &[usize],
) -> Result<PretrainBatch<T>> {
    let n = targets.n_variates;
    let mut mean = Vec::with_capacity(days.len() * n);
    let mut acf = Vec::with_capacity(days.len() * n);
    for &d in days {
        mean.extend(targets.mean_row(d).iter().map(|&v| T::of(v)));
        acf.extend(targets.stability_row(d).iter().map(|&v| T::of(v)));
    }
    Ok(PretrainBatch {
        embeddings: emb.matrix.clone(),
        centers: days.iter().map(|d| d + emb.offset).collect(),
        mean: Tensor::matrix(days.len(), n, mean)?,
        acf: Tensor::matrix(days.len(), n, acf)?,
    })
}

pub fn warmup_batch<T: Scalar>(
    emb: &DatasetEmbeddings<T>,
    dataset: &SeriesDataset,
    days: &[usize],
) -> Result<WarmupBatch<T>> {
    Ok(WarmupBatch {
        embeddings: emb.matrix.clone(),
        centers: days.iter().map(|d| d + emb.offset).collect(),
        targets: rows_tensor(dataset, days.iter().copied())?,
    })
}

/// Samples are identified by their target day; each uses the `lookback` days
/// before it.
pub fn train_batch<T: Scalar>(
    emb: &DatasetEmbeddings<T>,
    dataset: &SeriesDataset,
    targets: &[usize],
    lookback: usize,
) -> Result<TrainBatch<T>> {
    if let Some(&t) = targets.iter().find(|&&t| t < lookback) {
        return Err(Error::Domain(format!(
            "target day {t} has fewer than {lookback} days before it"
        )));
    }
    Ok(TrainBatch {
        embeddings: emb.matrix.clone(),
        starts: targets.iter().map(|t| t - lookback + emb.offset).collect(),
        lookback,
        lookback_truth: rows_tensor(dataset, targets.iter().flat_map(|&t| t - lookback..t))?,
        target: rows_tensor(dataset, targets.iter().copied())?,
    })
}

// ----------------------------------------------------------------- pipeline

fn stream_rng(cfg: &TrainConfig, salt: u64) -> ChaCha8Rng {
    if cfg.deterministic {
        ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
    } else {
        ChaCha8Rng::from_entropy()
    }
}

fn dropout_rng(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Option<ChaCha8Rng> {
    (cfg.model.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(rng.next_u64()))
}

/// Generic epoch loop: shuffled mini-batches, one-cycle rate, validation at
/// each epoch end, early stopping that restores the best parameters.
struct StageRun<'a, T> {
    cfg: &'a TrainConfig,
    stage: Stage,
    log: &'a mut TrainingLog,
    clock: Instant,
    _marker: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> StageRun<'a, T> {
    fn run<S, E, V>(
        &mut self,
        items: &[usize],
        batch_size: usize,
        store_of: impl Fn(&mut S) -> &mut ParamStore<T>,
        state: &mut S,
        mut step: E,
        validate: V,
    ) -> Result<()>
    where
        E: FnMut(&mut S, &[usize], &mut AdamW<T>, f64, Option<ChaCha8Rng>) -> Result<f64>,
        V: Fn(&S) -> Result<Option<f64>>,
    {
        let epochs = self.cfg.stage_epochs(self.stage);
        if items.is_empty() || epochs == 0 {
            return Ok(());
        }
        let batch_size = batch_size.min(items.len());
        let per_epoch = items.len().div_ceil(batch_size);
        let total = per_epoch * epochs;
        let mut opt = AdamW::new(store_of(state), self.cfg.weight_decay);
        let mut rng = stream_rng(self.cfg, self.stage as u64 + 1);
        let mut order = items.to_vec();
        let mut best: Option<(f64, ParamStore<T>)> = None;
        let mut stale = 0;
        let mut global_step = 0;
        for epoch in 1..=epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch_size) {
                let lr = one_cycle_lr(global_step, total, &self.cfg.schedule)?;
                let drop = dropout_rng(self.cfg, &mut rng);
                let loss = step(state, chunk, &mut opt, lr, drop)?;
                global_step += 1;
                self.record("train", epoch, global_step, lr, loss);
            }
            let Some(val) = validate(state)? else {
                continue;
            };
            self.record("val", epoch, global_step, 0.0, val);
            info!("{:?} epoch {epoch}: validation loss {val:.6}", self.stage);
            if best.as_ref().is_none_or(|(b, _)| val < *b) {
                best = Some((val, store_of(state).clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.patience {
                    info!(
                        "{:?}: no improvement for {stale} epochs, stopping",
                        self.stage
                    );
                    break;
                }
            }
        }
        if let Some((_, params)) = best {
            let store = store_of(state);
            for (id, p) in params.iter() {
                *store.value_mut(id) = p.value.clone();
            }
        }
        Ok(())
    }

    fn record(&mut self, split: &str, epoch: usize, step: usize, lr: f64, loss: f64) {
        self.log.records.push(LogRecord {
            stage: self.stage,
            split: split.into(),
            epoch,
            step,
            lr,
            loss,
            wall_time: self.clock.elapsed().as_secs_f64(),
        });
    }
}

/// Mean of `eval` over `items` in chunks of `batch`, weighted by chunk size.
fn chunked_mean(
    items: &[usize],
    batch: usize,
    mut eval: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Option<f64>> {
    if items.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for chunk in items.chunks(batch.max(1)) {
        sum += eval(chunk)? * chunk.len() as f64;
    }
    Ok(Some(sum / items.len() as f64))
}

fn split_days(dataset: &SeriesDataset, split: Split) -> Result<Vec<usize>> {
    Ok(dataset.split_range(split)?.collect())
}

/// Trains the encoder with the mean and stability heads on training-split
/// days, validating on validation-split days.
pub fn pretrain_stage<T: Scalar>(
    cfg: &TrainConfig,
    data: &PreparedData,
    model: &mut EncoderModel<T>,
    log: &mut TrainingLog,
) -> Result<()> {
    let emb = DatasetEmbeddings::<T>::new(data, &model.config)?;
    let targets = compute_pretrain_targets(&data.dataset)?;
    let train = split_days(&data.dataset, Split::Train)?;
    let val = split_days(&data.dataset, Split::Val)?;
    let eval_batch = cfg.pretrain_batch;
    let validate = |m: &EncoderModel<T>| {
        chunked_mean(&val, eval_batch, |days| {
            m.evaluate(&pretrain_batch(&emb, &targets, days)?)
        })
    };
    let clock = Instant::now();
    if let Some(v) = validate(model)? {
        log.records.push(LogRecord {
            stage: Stage::Pretrain,
            split: "untrained".into(),
            epoch: 0,
            step: 0,
            lr: 0.0,
            loss: v,
            wall_time: 0.0,
        });
    }
    let mut run = StageRun {
        cfg,
        stage: Stage::Pretrain,
        log,
        clock,
        _marker: std::marker::PhantomData,
    };
    run.run(
        &train,
        cfg.pretrain_batch,
        |m: &mut EncoderModel<T>| &mut m.store,
        model,
        |m, days, opt, lr, drop| {
            m.pretrain_step(&pretrain_batch(&emb, &targets, days)?, opt, lr, drop)
        },
        validate,
    )
}

/// Trains the encoder and global decoder on single training-split days.
pub fn warmup_stage<T: Scalar>(
    cfg: &TrainConfig,
    data: &PreparedData,
    bundle: &mut ModelBundle<T>,
    log: &mut TrainingLog,
) -> Result<()> {
    let emb = DatasetEmbeddings::<T>::new(data, &bundle.config)?;
    let ds = &data.dataset;
    let train = split_days(ds, Split::Train)?;
    let val = split_days(ds, Split::Val)?;
    let mut run = StageRun {
        cfg,
        stage: Stage::Warmup,
        log,
        clock: Instant::now(),
        _marker: std::marker::PhantomData,
    };
    run.run(
        &train,
        cfg.batch,
        |b: &mut ModelBundle<T>| &mut b.store,
        bundle,
        |b, days, opt, lr, drop| b.warmup_step(&warmup_batch(&emb, ds, days)?, opt, lr, drop),
        |b| {
            chunked_mean(&val, cfg.batch, |days| {
                b.warmup_eval(&warmup_batch(&emb, ds, days)?)
            })
        },
    )
}

/// The single-step lookback → next-day objective over the whole bundle.
pub fn train_stage<T: Scalar>(
    cfg: &TrainConfig,
    data: &PreparedData,
    bundle: &mut ModelBundle<T>,
    log: &mut TrainingLog,
) -> Result<()> {
    let emb = DatasetEmbeddings::<T>::new(data, &bundle.config)?;
    let ds = &data.dataset;
    let l = cfg.lookback;
    let targets_of = |split| -> Result<Vec<usize>> {
        Ok(make_training_samples(ds, split, l)?
            .into_iter()
            .map(|s| s.target)
            .collect())
    };
    let train = targets_of(Split::Train)?;
    let val = targets_of(Split::Val).unwrap_or_default();
    let mut run = StageRun {
        cfg,
        stage: Stage::Train,
        log,
        clock: Instant::now(),
        _marker: std::marker::PhantomData,
    };
    run.run(
        &train,
        cfg.batch,
        |b: &mut ModelBundle<T>| &mut b.store,
        bundle,
        |b, days, opt, lr, drop| b.train_step(&train_batch(&emb, ds, days, l)?, opt, lr, drop),
        |b| {
            chunked_mean(&val, cfg.batch, |days| {
                b.train_eval(&train_batch(&emb, ds, days, l)?)
            })
        },
    )
}

/// [`train_stage`] with the encoder's learning rate scaled by
/// `cfg.fine_tune` when it arrives pretrained.
pub fn fine_tune_stage<T: Scalar>(
    cfg: &TrainConfig,
    data: &PreparedData,
    bundle: &mut ModelBundle<T>,
    encoder_pretrained: bool,
    log: &mut TrainingLog,
) -> Result<()> {
    if encoder_pretrained {
        let ids: Vec<_> = bundle.store.with_prefix("encoder.").collect();
        for id in ids {
            bundle.store.set_lr_scale(id, cfg.fine_tune);
        }
    }
    let result = train_stage(cfg, data, bundle, log);
    for id in bundle.store.ids().collect::<Vec<_>>() {
        bundle.store.set_lr_scale(id, 1.0);
    }
    result
}

/// Where stage checkpoints go: `encoder.ckpt`, `dert.ckpt`, `bundle.ckpt`.
pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("encoder.ckpt"),
        dir.join("dert.ckpt"),
        dir.join("bundle.ckpt"),
    )
}

#[derive(Debug, Clone)]
pub struct PipelineOutput<T> {
    pub bundle: ModelBundle<T>,
    pub encoder: EncoderModel<T>,
    pub log: TrainingLog,
}

/// Runs the enabled stages in order, writing stage checkpoints to `out_dir`
/// when given.
pub fn run_pipeline<T: Scalar>(
    cfg: &TrainConfig,
    data: &PreparedData,
    out_dir: Option<&Path>,
) -> Result<PipelineOutput<T>> {
    cfg.validate()?;
    let ds = &data.dataset;
    let (g, n) = (ds.granularity(), ds.n_variates());
    if ds.splits().is_none() {
        return Err(Error::Pipeline("dataset has not been split".into()));
    }
    let mut log = TrainingLog::default();
    let (encoder_path, dert_path, bundle_path) = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)
                .map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
            let (a, b, c) = checkpoint_paths(d);
            (Some(a), Some(b), Some(c))
        }
        None => (None, None, None),
    };

    let mut encoder = EncoderModel::<T>::new(cfg.model.clone(), n, cfg.seed)?;
    let pretrained = cfg.stages.pretrain;
    if pretrained {
        match &cfg.encoder_checkpoint {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Pipeline(format!(
                        "encoder checkpoint {} not found",
                        p.display()
                    )));
                }
                let ck = Checkpoint::load(p)?;
                encoder = EncoderModel::transfer(&ck, &cfg.model, n, cfg.seed)?;
                info!("loaded encoder from {}", p.display());
            }
            None => {
                info!("pretraining the date encoder");
                pretrain_stage(cfg, data, &mut encoder, &mut log)?;
            }
        }
        if let Some(p) = &encoder_path {
            encoder.save(p)?;
        }
    } else {
        // Record what an untrained encoder scores on the pretraining objective.
        let emb = DatasetEmbeddings::<T>::new(data, &cfg.model)?;
        let targets = compute_pretrain_targets(ds)?;
        let val = split_days(ds, Split::Val)?;
        if let Some(v) = chunked_mean(&val, cfg.pretrain_batch, |days| {
            encoder.evaluate(&pretrain_batch(&emb, &targets, days)?)
        })? {
            log.records.push(LogRecord {
                stage: Stage::Pretrain,
                split: "untrained".into(),
                epoch: 0,
                step: 0,
                lr: 0.0,
                loss: v,
                wall_time: 0.0,
            });
        }
    }

    let mut bundle = ModelBundle::<T>::new(cfg.model.clone(), g, n, cfg.seed)?;
    // The bundle's encoder starts from the same parameters the pretraining
    // stage started from (or finished with).
    bundle.load_from(&encoder.checkpoint(), &["encoder."])?;

    if cfg.stages.warmup {
        info!("warming up the global forecaster");
        warmup_stage(cfg, data, &mut bundle, &mut log)?;
        if let Some(p) = &dert_path {
            bundle.save(p, "dert", &["encoder.", "dert."])?;
        }
    }

    info!("training the full model");
    fine_tune_stage(cfg, data, &mut bundle, pretrained, &mut log)?;
    if let Some(p) = &bundle_path {
        bundle.save(p, "bundle", &[])?;
    }
    Ok(PipelineOutput {
        bundle,
        encoder,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchor_points() {
        let c = OneCycle::default();
        assert_eq!(one_cycle_lr(0, 100, &c).unwrap(), 4e-5);
        assert_eq!(one_cycle_lr(40, 100, &c).unwrap(), 1e-3);
        let last = one_cycle_lr(99, 100, &c).unwrap();
        assert!((last - 4e-9).abs() < 1e-20);
        assert!(matches!(one_cycle_lr(0, 0, &c), Err(Error::Config(_))));
        // End of the main fall: p2 = 40 + 0.9·60 = 94.
        assert!((one_cycle_lr(94, 100, &c).unwrap() - 4e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous() {
        let c = OneCycle::default();
        let total = 1000;
        let lrs: Vec<f64> = (0..total)
            .map(|s| one_cycle_lr(s, total, &c).unwrap())
            .collect();
        // Steepest cosine slope: the fall spans 540 steps over ~1e-3.
        let bound = std::f64::consts::PI / 2.0 * 1e-3 / 400.0;
        assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() <= bound));
    }

    #[test]
    fn adamw_examples() {
        let mut p = vec![1.0, -2.0];
        let mut st = Moments::zeros(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, 1, 1e-3, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, 2, 0.1, 0.5).unwrap();
        assert_eq!(p, vec![1.0 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);

        // Constant gradient: bias-corrected update magnitude is the rate.
        let mut q = vec![0.0];
        let mut st = Moments::zeros(1);
        let mut prev = 0.0f64;
        for t in 1..=200 {
            adamw_step(&mut q, &[0.3], &mut st, t, 1e-2, 0.0).unwrap();
            let step = prev - q[0];
            assert!((step - 1e-2).abs() < 1e-9);
            prev = q[0];
        }
        assert!(matches!(
            adamw_step(&mut q, &[f64::NAN], &mut st, 201, 1e-2, 0.0),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn config_defaults_and_overrides() {
        let c = TrainConfig::from_toml(
            "seed = 3\ntrain_epochs = 2\n[stages]\nwarmup = true\n[model]\nd_model = 32\n",
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.stage_epochs(Stage::Train), 2);
        assert_eq!(c.stage_epochs(Stage::Pretrain), 100);
        assert_eq!(c.stages.variant(), "11");
        assert_eq!(c.model.d_model, 32);
        assert_eq!((c.batch, c.pretrain_batch), (32, 8192));
        assert_eq!(c.weight_decay, 7e-4);
        assert!(TrainConfig::from_toml("nonsense = 1").is_err());
        assert!(TrainConfig::from_toml("batch = 0").is_err());
    }
}
