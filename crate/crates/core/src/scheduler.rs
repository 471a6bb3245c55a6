//! Day-wise composition of the global and local forecasters.
//!
//! The global forecast covers lookback and forecast days. Lookback residuals
//! (truth minus global) seed the local forecaster, which predicts one day at a
//! time: each step appends its prediction to the window and, while unused
//! older lookback days remain, prepends one of them.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand_chacha::ChaCha8Rng;

use crate::calendar::CalendarTables;
use crate::data::SeriesDataset;
use crate::error::{Error, Result};
use crate::models::{embedding_matrix, ModelBundle};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::training::AdamW;

/// Horizon → lookback defaults.
pub const DEFAULT_LOOKBACKS: [(usize, usize); 6] =
    [(1, 7), (3, 9), (7, 12), (30, 26), (90, 46), (180, 60)];

/// Lookback for `horizon`: the table entry for the smallest listed horizon
/// at least as long, or the longest entry beyond the table.
pub fn default_lookback(horizon: usize) -> usize {
    DEFAULT_LOOKBACKS
        .iter()
        .find(|(h, _)| *h >= horizon)
        .map(|&(_, l)| l)
        .unwrap_or(DEFAULT_LOOKBACKS[DEFAULT_LOOKBACKS.len() - 1].1)
}

/// Residual days the first step sees: `max(L − (H−1), min(L, 5))`.
pub fn initial_window(lookback: usize, horizon: usize) -> usize {
    let floor = lookback.min(5);
    lookback
        .saturating_sub(horizon.saturating_sub(1))
        .max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForecastRequest {
    /// First forecast day.
    pub anchor: NaiveDate,
    pub horizon: usize,
    pub lookback: usize,
}

impl ForecastRequest {
    /// A request using the default lookback for `horizon`.
    pub fn new(anchor: NaiveDate, horizon: usize) -> Self {
        Self {
            anchor,
            horizon,
            lookback: default_lookback(horizon),
        }
    }
}

/// What one recursion step consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTrace {
    pub date: NaiveDate,
    pub window_start: NaiveDate,
    pub truth_days: usize,
    pub predicted_days: usize,
}

impl StepTrace {
    pub fn window_days(&self) -> usize {
        self.truth_days + self.predicted_days
    }
}

/// Forecast values are `(H·G) × N`; day `h` occupies rows `h·G .. (h+1)·G`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult<T> {
    pub anchor: NaiveDate,
    pub granularity: usize,
    pub n_variates: usize,
    pub global: Tensor<T>,
    pub local: Tensor<T>,
    pub total: Tensor<T>,
    pub trace: Vec<StepTrace>,
}

impl<T: Scalar> ForecastResult<T> {
    pub fn horizon(&self) -> usize {
        self.global.rows() / self.granularity
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.horizon())
            .map(|h| self.anchor + Duration::days(h as i64))
            .collect()
    }
}

fn day_offset(dataset: &SeriesDataset, date: NaiveDate) -> Result<i64> {
    let start = dataset
        .start_date()
        .ok_or_else(|| Error::Request("dataset is empty".into()))?;
    Ok((date - start).num_days())
}

/// Runs the recursive schedule for one request. Lookback truth is read from
/// `dataset`; nothing at or after the anchor is read.
pub fn forecast<T: Scalar>(
    bundle: &ModelBundle<T>,
    request: &ForecastRequest,
    dataset: &SeriesDataset,
    tables: &CalendarTables,
) -> Result<ForecastResult<T>> {
    let (l, h) = (request.lookback, request.horizon);
    if h == 0 || l == 0 {
        return Err(Error::Request(format!(
            "horizon {h} and lookback {l} must be positive"
        )));
    }
    let (gr, n) = (bundle.granularity, bundle.n_variates);
    if dataset.granularity() != gr || dataset.n_variates() != n {
        return Err(Error::Request(format!(
            "dataset is G={}, N={} but the model expects G={gr}, N={n}",
            dataset.granularity(),
            dataset.n_variates()
        )));
    }
    let anchor_idx = day_offset(dataset, request.anchor)?;
    if anchor_idx < l as i64 || anchor_idx > dataset.len() as i64 {
        return Err(Error::Request(format!(
            "{l} lookback days before {} are not all in the dataset",
            request.anchor
        )));
    }
    let first_lookback = anchor_idx as usize - l;

    let cfg = &bundle.config;
    let span_start = request.anchor - Duration::days((l + cfg.preday) as i64);
    let emb = embedding_matrix::<T>(
        tables,
        &dataset.region,
        span_start,
        l + h + cfg.preday + cfg.postday,
    )?;

    let mut g = Graph::new();
    let e = g.constant(emb);
    let reps_var = bundle.encoder.encode_dates(&mut g, &bundle.store, e)?;
    let global_var = bundle
        .dert
        .global_forecast(&mut g, &bundle.store, reps_var, gr)?;
    let reps = g.value(reps_var).clone();
    let global_all = g.value(global_var).clone();
    let d = reps.cols();
    let day_len = gr * n;

    let residuals: Vec<T> = (0..l)
        .flat_map(|j| {
            let truth = dataset.day_values(first_lookback + j);
            let glob = &global_all.data()[j * day_len..(j + 1) * day_len];
            truth
                .iter()
                .zip(glob)
                .map(|(&t, &p)| T::of(t) - p)
                .collect::<Vec<_>>()
        })
        .collect();

    let mut head = l - initial_window(l, h);
    let mut predicted: Vec<T> = Vec::with_capacity(h * day_len);
    let mut trace = Vec::with_capacity(h);
    for step in 0..h {
        let mut window = residuals[head * day_len..].to_vec();
        window.extend_from_slice(&predicted);
        let days = window.len() / day_len;
        let rep_rows = reps.data()[head * d..(l + step + 1) * d].to_vec();
        let out = bundle.predict_next_day(
            &Tensor::matrix(days * gr, n, window)?,
            &Tensor::matrix(days + 1, d, rep_rows)?,
        )?;
        trace.push(StepTrace {
            date: request.anchor + Duration::days(step as i64),
            window_start: span_start + Duration::days((cfg.preday + head) as i64),
            truth_days: l - head,
            predicted_days: step,
        });
        predicted.extend_from_slice(out.output.data());
        head = head.saturating_sub(1);
    }

    let global = Tensor::matrix(h * gr, n, global_all.data()[l * day_len..].to_vec())?;
    let local = Tensor::matrix(h * gr, n, predicted)?;
    let total_data = global
        .data()
        .iter()
        .zip(local.data())
        .map(|(&a, &b)| a + b)
        .collect();
    Ok(ForecastResult {
        anchor: request.anchor,
        granularity: gr,
        n_variates: n,
        total: Tensor::matrix(h * gr, n, total_data)?,
        global,
        local,
        trace,
    })
}

/// A batch of lookback-then-target samples for the single-step objective.
///
/// `embeddings` spans every needed date with padding; `starts[b]` is the
/// embedding row of sample `b`'s first lookback day, and its `L+1` days are
/// consecutive from there.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    pub embeddings: Tensor<T>,
    pub starts: Vec<usize>,
    pub lookback: usize,
    /// `(B·L·G) × N` lookback truth.
    pub lookback_truth: Tensor<T>,
    /// `(B·G) × N` target-day truth.
    pub target: Tensor<T>,
}

/// MSE of global + local against the target day, with gradients reaching
/// every module.
pub fn train_loss<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    store: &crate::numerics::ParamStore<T>,
    batch: &TrainBatch<T>,
) -> Result<Var> {
    let (l, gr) = (batch.lookback, bundle.granularity);
    let tokens = l + 1;
    let b = batch.starts.len();

    // Encode each distinct date once.
    let mut slot = BTreeMap::new();
    for &s in &batch.starts {
        for row in s..s + tokens {
            slot.insert(row, 0usize);
        }
    }
    let centers: Vec<usize> = slot.keys().copied().collect();
    for (i, row) in centers.iter().enumerate() {
        slot.insert(*row, i);
    }
    let emb = g.constant(batch.embeddings.clone());
    let unique = bundle.encoder.encode_at(g, store, emb, &centers)?;
    let pick = batch
        .starts
        .iter()
        .flat_map(|&s| (s..s + tokens).map(|r| slot[&r]))
        .collect();
    let reps = g.gather_rows(unique, pick)?;

    let global = bundle.dert.global_forecast(g, store, reps, gr)?;
    let mut lb_rows = Vec::with_capacity(b * l * gr);
    let mut tg_rows = Vec::with_capacity(b * gr);
    for i in 0..b {
        lb_rows.extend(i * tokens * gr..(i * tokens + l) * gr);
        tg_rows.extend((i * tokens + l) * gr..(i * tokens + tokens) * gr);
    }
    let global_lb = g.gather_rows(global, lb_rows)?;
    let global_tg = g.gather_rows(global, tg_rows)?;
    let truth_lb = g.constant(batch.lookback_truth.clone());
    let residuals = g.sub(truth_lb, global_lb)?;
    let local = bundle.llf.forward(g, store, residuals, reps, b, l)?;
    let total = g.add(global_tg, local.output)?;
    let target = g.constant(batch.target.clone());
    g.mse(total, target)
}

impl<T: Scalar> ModelBundle<T> {
    pub fn train_eval(&self, batch: &TrainBatch<T>) -> Result<f64> {
        let mut g = Graph::new();
        let l = train_loss(&mut g, self, &self.store, batch)?;
        Ok(g.value(l).item().to_f64_lossy())
    }

    /// One optimizer step on the whole bundle; returns the pre-step loss.
    pub fn train_step(
        &mut self,
        batch: &TrainBatch<T>,
        optimizer: &mut AdamW<T>,
        lr: f64,
        rng: Option<ChaCha8Rng>,
    ) -> Result<f64> {
        let mut g = match rng {
            Some(r) => Graph::training(r),
            None => Graph::new(),
        };
        let l = train_loss(&mut g, self, &self.store, batch)?;
        let value = g.value(l).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Training(format!("training loss is {value}")));
        }
        g.backward(l)?;
        self.store.zero_grads();
        g.accumulate_param_grads(&mut self.store);
        optimizer.step(&mut self.store, lr)?;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    #[test]
    fn lookback_defaults() {
        let got: Vec<usize> = [1, 3, 7, 30, 90, 180]
            .iter()
            .map(|&h| default_lookback(h))
            .collect();
        assert_eq!(got, vec![7, 9, 12, 26, 46, 60]);
        assert_eq!(default_lookback(2), 9);
        assert_eq!(default_lookback(365), 60);
    }

    #[test]
    fn initial_windows() {
        assert_eq!(initial_window(7, 1), 7);
        assert_eq!(initial_window(7, 3), 5);
        assert_eq!(initial_window(26, 30), 5);
        assert_eq!(initial_window(3, 10), 3);
    }

    fn tiny_bundle(gr: usize, n: usize) -> ModelBundle<f64> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            ff_mult: 2,
            preday: 1,
            postday: 2,
            llf_encoder_layers: 1,
            llf_decoder_layers: 1,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        ModelBundle::new(cfg, gr, n, 3).unwrap()
    }

    fn dataset(days: usize, gr: usize, n: usize) -> SeriesDataset {
        let start = NaiveDate::from_ymd_opt(2022, 1, 1).unwrap();
        let values = (0..days * gr * n)
            .map(|i| ((i * 37) % 11) as f64 / 11.0)
            .collect();
        let names = (0..n).map(|j| format!("v{j}")).collect();
        SeriesDataset::new(start, gr, names, values, "").unwrap()
    }

    #[test]
    fn schedule_trace() {
        let b = tiny_bundle(3, 2);
        let d = dataset(30, 3, 2);
        let anchor = NaiveDate::from_ymd_opt(2022, 1, 15).unwrap();
        let r = forecast(
            &b,
            &ForecastRequest {
                anchor,
                horizon: 3,
                lookback: 7,
            },
            &d,
            &CalendarTables::empty(),
        )
        .unwrap();
        let sizes: Vec<usize> = r.trace.iter().map(StepTrace::window_days).collect();
        assert_eq!(sizes, vec![5, 7, 9]);
        assert_eq!(r.global.shape(), &[9, 2]);
        for ((t, g), l) in r
            .total
            .data()
            .iter()
            .zip(r.global.data())
            .zip(r.local.data())
        {
            assert_eq!(*t, g + l);
        }
        let one = forecast(
            &b,
            &ForecastRequest {
                anchor,
                horizon: 1,
                lookback: 7,
            },
            &d,
            &CalendarTables::empty(),
        )
        .unwrap();
        assert_eq!(one.trace.len(), 1);
        assert_eq!(one.trace[0].window_days(), 7);
    }

    #[test]
    fn insufficient_lookback_is_request_error() {
        let b = tiny_bundle(3, 2);
        let d = dataset(30, 3, 2);
        let anchor = NaiveDate::from_ymd_opt(2022, 1, 5).unwrap();
        let e = forecast(
            &b,
            &ForecastRequest {
                anchor,
                horizon: 1,
                lookback: 7,
            },
            &d,
            &CalendarTables::empty(),
        );
        assert!(matches!(e, Err(Error::Request(_))));
    }

    #[test]
    fn global_ignores_lookback_values() {
        let b = tiny_bundle(2, 1);
        let d = dataset(20, 2, 1);
        let mut values = d.values().to_vec();
        values.iter_mut().for_each(|v| *v += 3.0);
        let d2 =
            SeriesDataset::new(d.start_date().unwrap(), 2, vec!["v0".into()], values, "").unwrap();
        let req = ForecastRequest {
            anchor: NaiveDate::from_ymd_opt(2022, 1, 12).unwrap(),
            horizon: 4,
            lookback: 5,
        };
        let t = CalendarTables::empty();
        let a = forecast(&b, &req, &d, &t).unwrap();
        let c = forecast(&b, &req, &d2, &t).unwrap();
        assert_eq!(a.global, c.global);
        assert_ne!(a.local, c.local);
    }
}
