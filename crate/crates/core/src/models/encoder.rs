//! The sliding date encoder and its pretraining heads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::calendar::EMBEDDING_DIM;
use crate::error::{Error, Result};
use crate::numerics::{
    Checkpoint, Graph, Linear, ParamStore, SeqShape, Tensor, TransformerEncoder, Var,
};
use crate::scalar::Scalar;
use crate::training::AdamW;

/// Linear heads predicting each day's per-variate mean and stability score.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainHeads {
    pub mean: Linear,
    pub acf: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DertEncoder {
    pub input_proj: Linear,
    pub stack: TransformerEncoder,
    pub heads: Option<PretrainHeads>,
    pub preday: usize,
    pub postday: usize,
    pub d_model: usize,
}

impl DertEncoder {
    /// Registers the encoder, plus pretraining heads when `heads` gives the
    /// variate count.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        heads: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let input_proj = Linear::new(store, "encoder.input_proj", EMBEDDING_DIM, d, true, rng)?;
        let stack = TransformerEncoder::new(
            store,
            "encoder.stack",
            config.encoder_layers,
            config.dims(),
            rng,
        )?;
        let mut enc = Self {
            input_proj,
            stack,
            heads: None,
            preday: config.preday,
            postday: config.postday,
            d_model: d,
        };
        if let Some(n) = heads {
            enc.add_heads(store, n, rng)?;
        }
        Ok(enc)
    }

    pub fn add_heads<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        n_variates: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.heads = Some(PretrainHeads {
            mean: Linear::new(
                store,
                "pretrain.mean_head",
                self.d_model,
                n_variates,
                true,
                rng,
            )?,
            acf: Linear::new(
                store,
                "pretrain.acf_head",
                self.d_model,
                n_variates,
                true,
                rng,
            )?,
        });
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.preday + 1 + self.postday
    }

    /// Representations for the rows `centers` of an `n × 23` embedding matrix;
    /// each center needs `preday` rows before it and `postday` after.
    pub fn encode_at<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embeddings: Var,
        centers: &[usize],
    ) -> Result<Var> {
        Ok(self.encode_at_traced(g, store, embeddings, centers)?.0)
    }

    pub fn encode_at_traced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embeddings: Var,
        centers: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let (n, _) = g.shape(embeddings);
        if centers.is_empty() {
            return Err(Error::Domain("no dates to encode".into()));
        }
        let w = self.window();
        let mut index = Vec::with_capacity(centers.len() * w);
        for &c in centers {
            if c < self.preday || c + self.postday >= n {
                return Err(Error::Domain(format!(
                    "date {c} of {n} lacks a full {}+1+{} window",
                    self.preday, self.postday
                )));
            }
            index.extend(c - self.preday..=c + self.postday);
        }
        let projected = self.input_proj.forward(g, store, embeddings)?;
        let windows = g.gather_rows(projected, index)?;
        let shape = SeqShape::new(centers.len(), w);
        let (out, attn) = self.stack.forward_traced(g, store, windows, shape)?;
        let picks = (0..centers.len()).map(|b| b * w + self.preday).collect();
        Ok((g.gather_rows(out, picks)?, attn))
    }

    /// One representation per interior date: `n − preday − postday` rows.
    pub fn encode_dates<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        embeddings: Var,
    ) -> Result<Var> {
        let (n, _) = g.shape(embeddings);
        if n < self.window() {
            return Err(Error::Domain(format!(
                "{n} dates are fewer than the {}-day window",
                self.window()
            )));
        }
        let centers: Vec<usize> = (self.preday..n - self.postday).collect();
        self.encode_at(g, store, embeddings, &centers)
    }

    /// `(mean, acf)` head outputs for representations `reps`.
    pub fn pretrain_outputs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        reps: Var,
    ) -> Result<(Var, Var)> {
        let heads = self
            .heads
            .as_ref()
            .ok_or_else(|| Error::Config("encoder has no pretraining heads".into()))?;
        Ok((
            heads.mean.forward(g, store, reps)?,
            heads.acf.forward(g, store, reps)?,
        ))
    }
}

/// One pretraining batch: an embedding span, the rows to encode, and the
/// per-date targets (`centers.len() × N`).
#[derive(Debug, Clone)]
pub struct PretrainBatch<T> {
    pub embeddings: Tensor<T>,
    pub centers: Vec<usize>,
    pub mean: Tensor<T>,
    pub acf: Tensor<T>,
}

/// Half the mean-head MSE plus half the stability-head MSE.
pub fn pretrain_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    encoder: &DertEncoder,
    batch: &PretrainBatch<T>,
) -> Result<Var> {
    let emb = g.constant(batch.embeddings.clone());
    let reps = encoder.encode_at(g, store, emb, &batch.centers)?;
    let (mean, acf) = encoder.pretrain_outputs(g, store, reps)?;
    let mean_t = g.constant(batch.mean.clone());
    let acf_t = g.constant(batch.acf.clone());
    let l1 = g.mse(mean, mean_t)?;
    let l2 = g.mse(acf, acf_t)?;
    let s = g.add(l1, l2)?;
    Ok(g.scale(s, T::of(0.5)))
}

/// A standalone encoder (with heads) for the pretraining stage.
#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    pub config: ModelConfig,
    pub n_variates: usize,
    pub store: ParamStore<T>,
    pub encoder: DertEncoder,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn new(config: ModelConfig, n_variates: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = DertEncoder::new(&mut store, &config, Some(n_variates), &mut rng)?;
        Ok(Self {
            config,
            n_variates,
            store,
            encoder,
        })
    }

    /// Inference-mode representations for every interior row of `embeddings`.
    pub fn representations(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let e = g.constant(embeddings.clone());
        let r = self.encoder.encode_dates(&mut g, &self.store, e)?;
        Ok(g.value(r).clone())
    }

    /// Inference-mode pretraining loss.
    pub fn evaluate(&self, batch: &PretrainBatch<T>) -> Result<f64> {
        let mut g = Graph::new();
        let loss = pretrain_loss(&mut g, &self.store, &self.encoder, batch)?;
        Ok(g.value(loss).item().to_f64_lossy())
    }

    /// Forward, backward and one optimizer step; returns the pre-step loss.
    pub fn pretrain_step(
        &mut self,
        batch: &PretrainBatch<T>,
        optimizer: &mut AdamW<T>,
        lr: f64,
        rng: Option<ChaCha8Rng>,
    ) -> Result<f64> {
        let mut g = match rng {
            Some(r) => Graph::training(r),
            None => Graph::new(),
        };
        let loss = pretrain_loss(&mut g, &self.store, &self.encoder, batch)?;
        let value = g.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Training(format!("pretraining loss is {value}")));
        }
        g.backward(loss)?;
        self.store.zero_grads();
        g.accumulate_param_grads(&mut self.store);
        optimizer.step(&mut self.store, lr)?;
        Ok(value)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "encoder",
            "config": self.config,
            "n_variates": self.n_variates,
        }));
        ck.add_params(&self.store, &["encoder.", "pretrain."]);
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Exact reload with the checkpoint's own configuration.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(ck.metadata["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint config unreadable: {e}")))?;
        let n = ck.metadata["n_variates"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks n_variates".into()))?;
        let mut m = Self::new(config, n as usize, 0)?;
        ck.load_params(&mut m.store, &["encoder.", "pretrain."])?;
        Ok(m)
    }

    /// Loads the encoder part of a checkpoint into a model for another
    /// dataset. Heads are kept only when the variate count matches.
    pub fn transfer(
        ck: &Checkpoint,
        config: &ModelConfig,
        n_variates: usize,
        seed: u64,
    ) -> Result<Self> {
        check_transfer(ck, config)?;
        let mut m = Self::new(config.clone(), n_variates, seed)?;
        ck.load_params(&mut m.store, &["encoder."])?;
        if ck.metadata["n_variates"].as_u64() == Some(n_variates as u64) {
            ck.load_params(&mut m.store, &["pretrain."])?;
        }
        Ok(m)
    }

    /// Per-layer, per-head `window × window` attention for the date at row
    /// `target` of `embeddings`.
    pub fn export_attention(
        &self,
        embeddings: &Tensor<T>,
        target: usize,
    ) -> Result<Vec<Vec<Tensor<T>>>> {
        export_attention(&self.encoder, &self.store, embeddings, target)
    }
}

pub fn export_attention<T: Scalar>(
    encoder: &DertEncoder,
    store: &ParamStore<T>,
    embeddings: &Tensor<T>,
    target: usize,
) -> Result<Vec<Vec<Tensor<T>>>> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let (_, attn) = encoder.encode_at_traced(&mut g, store, e, &[target])?;
    attn.iter()
        .map(|&v| {
            let (w, shape) = g
                .attention_weights(v)
                .ok_or_else(|| Error::Domain("node carries no attention weights".into()))?;
            let block = shape.seq_q * shape.seq_k;
            (0..shape.heads)
                .map(|h| {
                    Tensor::matrix(
                        shape.seq_q,
                        shape.seq_k,
                        w[h * block..(h + 1) * block].to_vec(),
                    )
                })
                .collect()
        })
        .collect()
}

/// Architecture fields of an encoder checkpoint must match the target.
pub(crate) fn check_transfer(ck: &Checkpoint, config: &ModelConfig) -> Result<()> {
    let meta = &ck.metadata["config"];
    let get = |k: &str| meta[k].as_u64().map(|v| v as usize);
    for (key, want) in [
        ("d_model", config.d_model),
        ("encoder_layers", config.encoder_layers),
        ("n_heads", config.n_heads),
        ("ff_mult", config.ff_mult),
    ] {
        match get(key) {
            Some(have) if have == want => {}
            Some(have) => {
                return Err(Error::Transfer(format!(
                    "checkpoint {key} {have} does not match configured {want}"
                )))
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint metadata lacks {key}"
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradient_check_params;
    use rand::Rng;

    fn tiny(preday: usize, postday: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            ff_mult: 2,
            preday,
            postday,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn random_embeddings(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * EMBEDDING_DIM)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        Tensor::matrix(n, EMBEDDING_DIM, data).unwrap()
    }

    #[test]
    fn output_counts() {
        let m = EncoderModel::<f64>::new(tiny(7, 14), 2, 0).unwrap();
        assert_eq!(
            m.representations(&random_embeddings(30, 1))
                .unwrap()
                .shape(),
            &[9, 8]
        );
        assert!(matches!(
            m.representations(&random_embeddings(21, 1)),
            Err(Error::Domain(_))
        ));
        let m = EncoderModel::<f64>::new(tiny(0, 0), 2, 0).unwrap();
        assert_eq!(
            m.representations(&random_embeddings(1, 1)).unwrap().shape(),
            &[1, 8]
        );
    }

    #[test]
    fn singleton_window_matches_direct_stack() {
        let m = EncoderModel::<f64>::new(tiny(0, 0), 2, 3).unwrap();
        let e = random_embeddings(1, 4);
        let mut g = Graph::new();
        let x = g.constant(e.clone());
        let p = m.encoder.input_proj.forward(&mut g, &m.store, x).unwrap();
        let y = m
            .encoder
            .stack
            .forward(&mut g, &m.store, p, SeqShape::new(1, 1))
            .unwrap();
        assert_eq!(g.value(y), &m.representations(&e).unwrap());
    }

    #[test]
    fn identical_windows_give_identical_representations() {
        let m = EncoderModel::<f64>::new(tiny(2, 3), 2, 3).unwrap();
        let base = random_embeddings(6, 9);
        // Two copies of the same 6-row window back to back.
        let mut data = base.data().to_vec();
        data.extend_from_slice(base.data());
        let e = Tensor::matrix(12, EMBEDDING_DIM, data).unwrap();
        let r = m.representations(&e).unwrap();
        assert_eq!(r.row(0), r.row(6));
    }

    #[test]
    fn outside_window_does_not_matter() {
        let m = EncoderModel::<f64>::new(tiny(2, 3), 2, 3).unwrap();
        let e = random_embeddings(20, 2);
        let r = m.representations(&e).unwrap();
        let mut e2 = e.clone();
        // Row 0 is outside the window of interior date index 5 (rows 3..=8).
        e2.data_mut()[..EMBEDDING_DIM]
            .iter_mut()
            .for_each(|v| *v += 1.0);
        let r2 = m.representations(&e2).unwrap();
        assert_eq!(r.row(3), r2.row(3));
        assert_ne!(r.row(0), r2.row(0));
    }

    #[test]
    fn attention_export_shapes() {
        let m = EncoderModel::<f64>::new(tiny(7, 14), 2, 0).unwrap();
        let e = random_embeddings(30, 1);
        let a = m.export_attention(&e, 7).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].len(), 2);
        assert_eq!(a[0][0].shape(), &[22, 22]);
        for h in &a[0] {
            for r in 0..22 {
                let s: f64 = h.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let one = EncoderModel::<f64>::new(
            ModelConfig {
                n_heads: 1,
                ..tiny(7, 14)
            },
            2,
            0,
        )
        .unwrap();
        let a = one.export_attention(&e, 10).unwrap();
        assert_eq!(a.iter().map(Vec::len).sum::<usize>(), 1);
        assert!(m.export_attention(&e, 3).is_err());
    }

    fn batch(n: usize) -> PretrainBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        PretrainBatch {
            embeddings: random_embeddings(12, 5),
            centers: vec![2, 5, 8],
            mean: Tensor::matrix(3, n, (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
            acf: Tensor::matrix(3, n, (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap(),
        }
    }

    #[test]
    fn loss_weighting() {
        let mut m = EncoderModel::<f64>::new(tiny(2, 3), 1, 0).unwrap();
        // Zero the heads: outputs equal the biases.
        let heads = m.encoder.heads.clone().unwrap();
        for l in [&heads.mean, &heads.acf] {
            m.store
                .value_mut(l.weight)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        m.store.value_mut(heads.mean.bias.unwrap()).data_mut()[0] = 1.0;
        m.store.value_mut(heads.acf.bias.unwrap()).data_mut()[0] = 0.5;
        let mut b = batch(1);
        b.mean = Tensor::full(&[3, 1], 1.0);
        b.acf = Tensor::full(&[3, 1], 0.5);
        assert_eq!(m.evaluate(&b).unwrap(), 0.0);
        b.mean = Tensor::full(&[3, 1], 3.0);
        assert!((m.evaluate(&b).unwrap() - 0.5 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_decreases_and_repeats() {
        let run = || {
            let mut m = EncoderModel::<f64>::new(tiny(2, 3), 2, 7).unwrap();
            let mut opt = AdamW::new(&m.store, 0.0);
            let b = batch(2);
            (0..10)
                .map(|_| m.pretrain_step(&b, &mut opt, 1e-3, None).unwrap())
                .collect::<Vec<_>>()
        };
        let losses = run();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert_eq!(losses, run());
    }

    #[test]
    fn heads_gradients() {
        let mut m = EncoderModel::<f64>::new(tiny(2, 3), 2, 7).unwrap();
        let b = batch(2);
        let enc = m.encoder.clone();
        let report =
            gradient_check_params(&mut m.store, |g, s| pretrain_loss(g, s, &enc, &b), 1e-5)
                .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn save_load_and_transfer() {
        let m = EncoderModel::<f64>::new(tiny(7, 14), 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("encoder.ckpt");
        m.save(&p).unwrap();
        let back = EncoderModel::<f64>::load(&p).unwrap();
        let e = random_embeddings(25, 8);
        assert_eq!(
            m.representations(&e).unwrap(),
            back.representations(&e).unwrap()
        );

        let ck = Checkpoint::load(&p).unwrap();
        let other = EncoderModel::<f64>::transfer(&ck, &tiny(7, 14), 5, 99).unwrap();
        assert_eq!(
            m.representations(&e).unwrap(),
            other.representations(&e).unwrap()
        );
        let mh = other.encoder.heads.as_ref().unwrap();
        assert_eq!(other.store.value(mh.mean.weight).shape(), &[8, 5]);

        let wide = ModelConfig {
            d_model: 16,
            ..tiny(7, 14)
        };
        assert!(matches!(
            EncoderModel::<f64>::transfer(&ck, &wide, 2, 0),
            Err(Error::Transfer(_))
        ));

        std::fs::write(&p, b"garbage").unwrap();
        assert!(EncoderModel::<f64>::load(&p).is_err());
    }
}
