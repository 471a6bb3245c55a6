//! The local forecaster: residual patches in, one day of residuals out.

use rand_chacha::ChaCha8Rng;

use super::dert::expand_days;
use super::{ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    FeedForward, Graph, Linear, ParamStore, SeqShape, Tensor, TransformerDecoder,
    TransformerEncoder, Var,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Longlongformer {
    pub patch_embed: Linear,
    pub encoder: TransformerEncoder,
    pub decoder: TransformerDecoder,
    pub prelim: FeedForward,
    /// `d_model → d_model → N`; the output layer has no bias since a shared
    /// shift cancels in the token softmax.
    pub logit: FeedForward,
    pub granularity: usize,
    pub n_variates: usize,
}

/// Graph nodes of one forward pass over `batch` samples.
#[derive(Debug, Clone, Copy)]
pub struct LocalOutput {
    /// `(batch·G) × N` residual forecast.
    pub output: Var,
    /// `(batch·(L+1)) × N` mixture weights; token `L` weights the prelim.
    pub weights: Var,
    /// `(batch·G) × N` preliminary prediction.
    pub prelim: Var,
}

impl Longlongformer {
    /// `shared_prelim` reuses an existing MLP (normally the global decoder);
    /// otherwise a fresh one is registered under `llf.prelim`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        granularity: usize,
        n_variates: usize,
        shared_prelim: Option<FeedForward>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = config.d_model;
        let dims = config.dims();
        let patch_embed = Linear::new(
            store,
            "llf.patch_embed",
            granularity * n_variates,
            d,
            true,
            rng,
        )?;
        let encoder =
            TransformerEncoder::new(store, "llf.encoder", config.llf_encoder_layers, dims, rng)?;
        let decoder =
            TransformerDecoder::new(store, "llf.decoder", config.llf_decoder_layers, dims, rng)?;
        let prelim = match shared_prelim {
            Some(mlp) => mlp,
            None => FeedForward::new(store, "llf.prelim", d, 2 * d, n_variates, true, rng)?,
        };
        let logit = FeedForward::new(store, "llf.logit", d, d, n_variates, false, rng)?;
        Ok(Self {
            patch_embed,
            encoder,
            decoder,
            prelim,
            logit,
            granularity,
            n_variates,
        })
    }

    /// Flattens each `G × N` patch of `(count·G) × N` rows and projects it to
    /// one token.
    pub fn embed_patches<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
    ) -> Result<Var> {
        let (r, c) = g.shape(patches);
        let gn = self.granularity;
        if c != self.n_variates || r % gn != 0 {
            return Err(Error::Domain(format!(
                "{r}×{c} patch rows are not whole {gn}×{} days",
                self.n_variates
            )));
        }
        let flat = g.reshape(patches, r / gn, gn * c)?;
        self.patch_embed.forward(g, store, flat)
    }

    /// Predicts the day after each sample's lookback.
    ///
    /// `residuals` holds `batch·L` days of `G × N` rows, sample-major;
    /// `reps` holds `batch·(L+1)` representations, the last of each sample
    /// being the day to predict.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        residuals: Var,
        reps: Var,
        batch: usize,
        lookback: usize,
    ) -> Result<LocalOutput> {
        let gr = self.granularity;
        if batch == 0 || lookback == 0 {
            return Err(Error::Domain(
                "need at least one sample with one lookback day".into(),
            ));
        }
        let (rr, _) = g.shape(residuals);
        if rr != batch * lookback * gr {
            return Err(Error::Domain(format!(
                "{rr} residual rows, expected {batch}·{lookback}·{gr}"
            )));
        }
        let tokens = lookback + 1;
        let (nr, _) = g.shape(reps);
        if nr != batch * tokens {
            return Err(Error::Domain(format!(
                "{nr} representations for {batch} samples of {lookback} lookback days; need L+1 each"
            )));
        }
        let patches = self.embed_patches(g, store, residuals)?;
        let memory_shape = SeqShape::new(batch, lookback);
        let memory = self.encoder.forward(g, store, patches, memory_shape)?;
        let decoded = self.decoder.forward(
            g,
            store,
            reps,
            memory,
            SeqShape::new(batch, tokens),
            memory_shape,
        )?;

        let next: Vec<usize> = (0..batch).map(|b| b * tokens + lookback).collect();
        let next = g.gather_rows(decoded, next)?;
        let prelim = expand_days(g, store, &self.prelim, next, gr)?;

        let logits = self.logit.forward(g, store, decoded)?;
        let weights = g.block_softmax(logits, tokens)?;

        let pool = g.concat_rows(&[residuals, prelim])?;
        let prelim_base = batch * lookback * gr;
        let mut index = Vec::with_capacity(batch * tokens * gr);
        for b in 0..batch {
            for s in 0..lookback {
                index.extend((b * lookback + s) * gr..(b * lookback + s + 1) * gr);
            }
            index.extend(prelim_base + b * gr..prelim_base + (b + 1) * gr);
        }
        let candidates = g.gather_rows(pool, index)?;
        let output = g.mixture(weights, candidates, tokens, gr)?;
        Ok(LocalOutput {
            output,
            weights,
            prelim,
        })
    }
}

/// Values of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalForecast<T> {
    pub output: Tensor<T>,
    pub weights: Tensor<T>,
    pub prelim: Tensor<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Inference for one sample: `L·G × N` residuals and `(L+1) × d`
    /// representations.
    pub fn predict_next_day(
        &self,
        residuals: &Tensor<T>,
        reps: &Tensor<T>,
    ) -> Result<LocalForecast<T>> {
        let gr = self.granularity;
        if !residuals.rows().is_multiple_of(gr) || residuals.cols() != self.n_variates {
            return Err(Error::Domain(format!(
                "residual patches of shape {:?} do not match G={gr}, N={}",
                residuals.shape(),
                self.n_variates
            )));
        }
        let lookback = residuals.rows() / gr;
        let mut g = Graph::new();
        let r = g.constant(residuals.clone());
        let d = g.constant(reps.clone());
        let out = self.llf.forward(&mut g, &self.store, r, d, 1, lookback)?;
        Ok(LocalForecast {
            output: g.value(out.output).clone(),
            weights: g.value(out.weights).clone(),
            prelim: g.value(out.prelim).clone(),
        })
    }
}
