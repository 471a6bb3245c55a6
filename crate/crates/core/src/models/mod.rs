//! The three networks and the bundle that ties them to one parameter store.
//!
//! Parameter names (checkpoint keys):
//!
//! | prefix | module |
//! |---|---|
//! | `encoder.input_proj`, `encoder.stack.layers.{i}.*`, `encoder.stack.final_norm` | sliding date encoder |
//! | `pretrain.mean_head`, `pretrain.acf_head` | pretraining heads (encoder checkpoints only) |
//! | `dert.decoder.fc1`, `dert.decoder.fc2` | global decoder MLP |
//! | `llf.patch_embed`, `llf.encoder.*`, `llf.decoder.*`, `llf.logit.*` | local forecaster |
//! | `llf.prelim.*` | preliminary MLP, only when not shared with `dert.decoder` |
//!
//! Inside a layer: `norm1`, `attn.{query,key,value,output}`, `norm2`, `ff.fc1`,
//! `ff.fc2` (decoder layers: `self_attn`, `cross_attn`, `norm3`); every linear
//! map has `.weight` (in × out) and, except attention keys and the logit
//! head's output, `.bias`; layer norms have `.gamma` and `.beta`.

pub mod dert;
pub mod encoder;
pub mod longlongformer;

use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::{build_embedding_range, CalendarTables, DateKey, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, ParamStore, Tensor, TransformerDims};
use crate::scalar::Scalar;

use dert::Dert;
use encoder::DertEncoder;
use longlongformer::Longlongformer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    /// Layers in the sliding date encoder (1 or 4 in practice).
    pub encoder_layers: usize,
    pub llf_encoder_layers: usize,
    pub llf_decoder_layers: usize,
    pub preday: usize,
    pub postday: usize,
    pub dropout: f64,
    /// Reuse the global decoder as the local forecaster's preliminary MLP.
    pub share_prelim: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            ff_mult: 4,
            encoder_layers: 1,
            llf_encoder_layers: 4,
            llf_decoder_layers: 4,
            preday: 7,
            postday: 14,
            dropout: 0.05,
            share_prelim: true,
        }
    }
}

impl ModelConfig {
    /// The configuration used by the synthetic acceptance run.
    pub fn small() -> Self {
        Self {
            d_model: 32,
            ..Self::default()
        }
    }

    pub fn window(&self) -> usize {
        self.preday + 1 + self.postday
    }

    pub fn dims(&self) -> TransformerDims {
        TransformerDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ff_mult: self.ff_mult,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model must be even for positional encoding, got {}",
                self.d_model
            )));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("ff_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Static embeddings for `count` consecutive days from `start` as a
/// `count × 23` matrix.
///
/// When the region has a calendar table, the whole span must lie inside its
/// coverage.
pub fn embedding_matrix<T: Scalar>(
    tables: &CalendarTables,
    region: &str,
    start: NaiveDate,
    count: usize,
) -> Result<Tensor<T>> {
    if count == 0 {
        return Err(Error::Domain("empty embedding span".into()));
    }
    let end = start + Duration::days(count as i64 - 1);
    let table = tables.region(region);
    if let Some((lo, hi)) = table.coverage() {
        if start < lo || end > hi {
            return Err(Error::Request(format!(
                "dates {start}..={end} fall outside the {region:?} calendar table ({lo}..={hi})"
            )));
        }
    }
    let rows = build_embedding_range(
        &DateKey::from_date(start, region),
        &DateKey::from_date(end, region),
        tables,
    )?;
    let data = rows
        .iter()
        .flat_map(|e| e.values.iter().map(|&v| T::of(v)))
        .collect();
    Tensor::matrix(count, EMBEDDING_DIM, data)
}

/// Encoder, global decoder and local forecaster over one parameter store.
#[derive(Debug, Clone)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub granularity: usize,
    pub n_variates: usize,
    pub store: ParamStore<T>,
    pub encoder: DertEncoder,
    pub dert: Dert,
    pub llf: Longlongformer,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(
        config: ModelConfig,
        granularity: usize,
        n_variates: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if granularity == 0 || n_variates == 0 {
            return Err(Error::Config(format!(
                "granularity {granularity} and variate count {n_variates} must be positive"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = DertEncoder::new(&mut store, &config, None, &mut rng)?;
        let dert = Dert::new(&mut store, &config, n_variates, &mut rng)?;
        let prelim = config.share_prelim.then(|| dert.decoder.clone());
        let llf = Longlongformer::new(
            &mut store,
            &config,
            granularity,
            n_variates,
            prelim,
            &mut rng,
        )?;
        Ok(Self {
            config,
            granularity,
            n_variates,
            store,
            encoder,
            dert,
            llf,
        })
    }

    pub fn metadata(&self, kind: &str) -> serde_json::Value {
        serde_json::json!({
            "kind": kind,
            "config": self.config,
            "granularity": self.granularity,
            "n_variates": self.n_variates,
        })
    }

    /// Saves parameters under `prefixes` (all when empty).
    pub fn save(&self, path: &Path, kind: &str, prefixes: &[&str]) -> Result<()> {
        let mut ck = Checkpoint::new(self.metadata(kind));
        ck.add_params(
            &self.store,
            if prefixes.is_empty() { &[""] } else { prefixes },
        );
        ck.save(path)
    }

    /// Rebuilds a bundle from a full bundle checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let (config, granularity, n_variates) = bundle_shape(&ck)?;
        let mut bundle = Self::new(config, granularity, n_variates, 0)?;
        bundle.load_from(&ck, &[""])?;
        Ok(bundle)
    }

    /// Overwrites the parameters under `prefixes` from a checkpoint with the
    /// same shapes.
    pub fn load_from(&mut self, ck: &Checkpoint, prefixes: &[&str]) -> Result<usize> {
        if let Some(d) = ck
            .metadata
            .pointer("/config/d_model")
            .and_then(|v| v.as_u64())
        {
            if d as usize != self.config.d_model {
                return Err(Error::Transfer(format!(
                    "checkpoint d_model {d} does not match configured {}",
                    self.config.d_model
                )));
            }
        }
        ck.load_params(&mut self.store, prefixes)
    }
}

/// Configuration, granularity and variate count recorded in a checkpoint.
pub fn bundle_shape(ck: &Checkpoint) -> Result<(ModelConfig, usize, usize)> {
    let meta = &ck.metadata;
    let config: ModelConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint config unreadable: {e}")))?;
    let field = |k: &str| {
        meta[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {k}")))
    };
    Ok((config, field("granularity")?, field("n_variates")?))
}
