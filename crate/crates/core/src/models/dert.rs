//! The global forecaster: a date representation expanded into a whole day.

use rand_chacha::ChaCha8Rng;

use super::encoder::DertEncoder;
use super::{ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    sinusoidal_positional_encoding, FeedForward, Graph, ParamStore, Tensor, Var,
};
use crate::scalar::Scalar;
use crate::training::AdamW;

#[derive(Debug, Clone, PartialEq)]
pub struct Dert {
    /// `d_model → 2·d_model → N`, applied to each of the G copies.
    pub decoder: FeedForward,
    pub d_model: usize,
    pub n_variates: usize,
}

impl Dert {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        n_variates: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = config.d_model;
        Ok(Self {
            decoder: FeedForward::new(store, "dert.decoder", d, 2 * d, n_variates, true, rng)?,
            d_model: d,
            n_variates,
        })
    }

    /// `(m·G) × N` predictions for `m` representations; day `i` occupies rows
    /// `i·G .. (i+1)·G`.
    pub fn global_forecast<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        reps: Var,
        granularity: usize,
    ) -> Result<Var> {
        expand_days(g, store, &self.decoder, reps, granularity)
    }
}

/// Duplicates each representation `granularity` times, adds the sinusoidal
/// position of each copy, and maps every copy through `mlp`.
pub fn expand_days<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    mlp: &FeedForward,
    reps: Var,
    granularity: usize,
) -> Result<Var> {
    if granularity == 0 {
        return Err(Error::Config("granularity must be positive".into()));
    }
    let (m, d) = g.shape(reps);
    let index = (0..m)
        .flat_map(|i| std::iter::repeat_n(i, granularity))
        .collect();
    let copies = g.gather_rows(reps, index)?;
    let pe = g.constant(sinusoidal_positional_encoding(granularity, d)?);
    let x = g.add_broadcast(copies, pe)?;
    mlp.forward(g, store, x)
}

/// Embedding span, rows to forecast, and the `(centers·G) × N` truth.
#[derive(Debug, Clone)]
pub struct WarmupBatch<T> {
    pub embeddings: Tensor<T>,
    pub centers: Vec<usize>,
    pub targets: Tensor<T>,
}

pub fn warmup_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    encoder: &DertEncoder,
    dert: &Dert,
    granularity: usize,
    batch: &WarmupBatch<T>,
) -> Result<Var> {
    let emb = g.constant(batch.embeddings.clone());
    let reps = encoder.encode_at(g, store, emb, &batch.centers)?;
    let pred = dert.global_forecast(g, store, reps, granularity)?;
    let target = g.constant(batch.targets.clone());
    g.mse(pred, target)
}

impl<T: Scalar> ModelBundle<T> {
    /// Global forecast for consecutive dates: `embeddings` must carry
    /// `preday` rows before and `postday` rows after them.
    pub fn global_days(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let e = g.constant(embeddings.clone());
        let reps = self.encoder.encode_dates(&mut g, &self.store, e)?;
        let out = self
            .dert
            .global_forecast(&mut g, &self.store, reps, self.granularity)?;
        Ok(g.value(out).clone())
    }

    pub fn warmup_eval(&self, batch: &WarmupBatch<T>) -> Result<f64> {
        let mut g = Graph::new();
        let l = warmup_loss(
            &mut g,
            &self.store,
            &self.encoder,
            &self.dert,
            self.granularity,
            batch,
        )?;
        Ok(g.value(l).item().to_f64_lossy())
    }

    /// One optimizer step on the global forecaster alone; returns the loss.
    pub fn warmup_step(
        &mut self,
        batch: &WarmupBatch<T>,
        optimizer: &mut AdamW<T>,
        lr: f64,
        rng: Option<ChaCha8Rng>,
    ) -> Result<f64> {
        let mut g = match rng {
            Some(r) => Graph::training(r),
            None => Graph::new(),
        };
        let l = warmup_loss(
            &mut g,
            &self.store,
            &self.encoder,
            &self.dert,
            self.granularity,
            batch,
        )?;
        let value = g.value(l).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Training(format!("warm-up loss is {value}")));
        }
        g.backward(l)?;
        self.store.zero_grads();
        g.accumulate_param_grads(&mut self.store);
        optimizer.step(&mut self.store, lr)?;
        Ok(value)
    }
}
