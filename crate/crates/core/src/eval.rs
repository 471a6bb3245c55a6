//! Error metrics, rolling evaluation over the test split, naive baselines and
//! plot-data export.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Duration;
use rayon::prelude::*;
use serde::Serialize;

use crate::autocorr::lagged_autocorrelation;
use crate::calendar::CalendarTables;
use crate::data::{SeriesDataset, Split};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::scalar::Scalar;
use crate::scheduler::{default_lookback, forecast, ForecastRequest, ForecastResult};

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Domain(format!(
            "prediction has {a} values, truth has {b}"
        )));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::Domain("no values to score".into()));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::Domain("no values to score".into()));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Running sums of errors per variate.
#[derive(Debug, Clone, PartialEq)]
struct ErrorSums {
    sq: Vec<f64>,
    abs: Vec<f64>,
    count: usize,
    windows: usize,
}

impl ErrorSums {
    fn new(n: usize) -> Self {
        Self {
            sq: vec![0.0; n],
            abs: vec![0.0; n],
            count: 0,
            windows: 0,
        }
    }

    /// `pred` and `truth` are row-major `rows × n`.
    fn add(&mut self, pred: &[f64], truth: &[f64]) {
        let n = self.sq.len();
        for (p, t) in pred.chunks(n).zip(truth.chunks(n)) {
            for j in 0..n {
                let e = p[j] - t[j];
                self.sq[j] += e * e;
                self.abs[j] += e.abs();
            }
        }
        self.count += pred.len() / n;
        self.windows += 1;
    }

    fn merge(mut self, other: &ErrorSums) -> Self {
        for j in 0..self.sq.len() {
            self.sq[j] += other.sq[j];
            self.abs[j] += other.abs[j];
        }
        self.count += other.count;
        self.windows += other.windows;
        self
    }

    fn finish(&self) -> Option<Metrics> {
        if self.windows == 0 {
            return None;
        }
        let rows = self.count as f64;
        let n = self.sq.len() as f64;
        Some(Metrics {
            mse: self.sq.iter().sum::<f64>() / (rows * n),
            mae: self.abs.iter().sum::<f64>() / (rows * n),
            per_variate_mse: self.sq.iter().map(|s| s / rows).collect(),
            per_variate_mae: self.abs.iter().map(|s| s / rows).collect(),
            windows: self.windows,
            values: self.count * self.sq.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub per_variate_mse: Vec<f64>,
    pub per_variate_mae: Vec<f64>,
    pub windows: usize,
    /// Scored elements: windows · H · G · N.
    pub values: usize,
}

/// Scores for one horizon; `None` marks a column that could not be computed
/// (no admissible window, or seasonal-naive with a lookback under 7).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonReport {
    pub horizon: usize,
    pub lookback: usize,
    pub model: Option<Metrics>,
    pub persistence: Option<Metrics>,
    pub seasonal_naive: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub original_units: bool,
    pub variates: Vec<String>,
    pub horizons: Vec<HorizonReport>,
}

impl EvalReport {
    pub fn horizon(&self, h: usize) -> Option<&HorizonReport> {
        self.horizons.iter().find(|r| r.horizon == h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub horizons: Vec<usize>,
    /// Per-horizon lookbacks; defaults to the standard mapping.
    pub lookbacks: Option<Vec<usize>>,
    /// Score in original units using the dataset's normalization statistics.
    pub original_units: bool,
    pub split: Split,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            horizons: vec![1, 3, 7, 30, 90, 180],
            lookbacks: None,
            original_units: false,
            split: Split::Test,
        }
    }
}

impl EvalOptions {
    fn pairs(&self) -> Result<Vec<(usize, usize)>> {
        match &self.lookbacks {
            Some(l) if l.len() != self.horizons.len() => Err(Error::Config(format!(
                "{} lookbacks for {} horizons",
                l.len(),
                self.horizons.len()
            ))),
            Some(l) => Ok(self
                .horizons
                .iter()
                .copied()
                .zip(l.iter().copied())
                .collect()),
            None => Ok(self
                .horizons
                .iter()
                .map(|&h| (h, default_lookback(h)))
                .collect()),
        }
    }
}

/// Anchor day indices whose lookback and horizon both fit in `split`,
/// sliding one day at a time.
pub fn rolling_anchors(
    dataset: &SeriesDataset,
    split: Split,
    horizon: usize,
    lookback: usize,
) -> Result<Vec<usize>> {
    let r = dataset.split_range(split)?;
    let first = r.start + lookback;
    if first + horizon > r.end {
        return Ok(Vec::new());
    }
    Ok((first..=r.end - horizon).collect())
}

/// `days` of dataset values, in original units when asked.
fn truth_rows(dataset: &SeriesDataset, start: usize, days: usize, original: bool) -> Vec<f64> {
    let n = dataset.n_variates();
    let mut v: Vec<f64> = (start..start + days)
        .flat_map(|d| dataset.day_values(d).to_vec())
        .collect();
    if original {
        to_original(dataset, &mut v, n);
    }
    v
}

fn to_original(dataset: &SeriesDataset, values: &mut [f64], n: usize) {
    if let Some(stats) = dataset.stats() {
        for row in values.chunks_mut(n) {
            for (j, x) in row.iter_mut().enumerate() {
                *x = stats.denormalize(j, *x);
            }
        }
    }
}

/// Slides the forecast anchor over the evaluation split and averages the
/// errors of the model and both naive baselines per horizon.
///
/// Windows are scored in parallel and reduced in anchor order, so results do
/// not depend on the thread count.
pub fn rolling_evaluate<T: Scalar>(
    bundle: &ModelBundle<T>,
    dataset: &SeriesDataset,
    tables: &CalendarTables,
    options: &EvalOptions,
) -> Result<EvalReport> {
    evaluate(Some((bundle, tables)), dataset, options)
}

/// The rolling protocol with only the persistence and seasonal-naive
/// forecasts.
pub fn naive_baselines(dataset: &SeriesDataset, options: &EvalOptions) -> Result<EvalReport> {
    evaluate::<f64>(None, dataset, options)
}

/// Persistence: the last lookback day repeated over the horizon.
pub fn persistence_forecast(dataset: &SeriesDataset, anchor: usize, horizon: usize) -> Vec<f64> {
    let last = dataset.day_values(anchor - 1);
    (0..horizon).flat_map(|_| last.to_vec()).collect()
}

/// Weekly seasonal naive: each forecast day repeats the same weekday from the
/// last seven lookback days.
pub fn seasonal_naive_forecast(dataset: &SeriesDataset, anchor: usize, horizon: usize) -> Vec<f64> {
    (0..horizon)
        .flat_map(|h| dataset.day_values(anchor - 7 + h % 7).to_vec())
        .collect()
}

fn evaluate<T: Scalar>(
    model: Option<(&ModelBundle<T>, &CalendarTables)>,
    dataset: &SeriesDataset,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let n = dataset.n_variates();
    let orig = options.original_units;
    let mut horizons = Vec::new();
    for (h, l) in options.pairs()? {
        let anchors = rolling_anchors(dataset, options.split, h, l)?;
        let per_window: Vec<[Option<ErrorSums>; 3]> = anchors
            .par_iter()
            .map(|&a| -> Result<[Option<ErrorSums>; 3]> {
                let truth = truth_rows(dataset, a, h, orig);
                let score = |mut pred: Vec<f64>| {
                    if orig {
                        to_original(dataset, &mut pred, n);
                    }
                    let mut s = ErrorSums::new(n);
                    s.add(&pred, &truth);
                    s
                };
                let m = match model {
                    Some((bundle, tables)) => {
                        let req = ForecastRequest {
                            anchor: dataset.date(a),
                            horizon: h,
                            lookback: l,
                        };
                        let r = forecast(bundle, &req, dataset, tables)?;
                        Some(score(r.total.to_f64_vec()))
                    }
                    None => None,
                };
                let p = Some(score(persistence_forecast(dataset, a, h)));
                let s = (l >= 7).then(|| score(seasonal_naive_forecast(dataset, a, h)));
                Ok([m, p, s])
            })
            .collect::<Result<_>>()?;
        let reduce = |k: usize| {
            per_window
                .iter()
                .filter_map(|w| w[k].as_ref())
                .fold(ErrorSums::new(n), |acc, s| acc.merge(s))
                .finish()
        };
        horizons.push(HorizonReport {
            horizon: h,
            lookback: l,
            model: reduce(0),
            persistence: reduce(1),
            seasonal_naive: if l >= 7 { reduce(2) } else { None },
        });
    }
    Ok(EvalReport {
        original_units: orig,
        variates: dataset.variate_names().to_vec(),
        horizons,
    })
}

/// Writes `path` as long-format CSV (one row per forecast point and variate)
/// and, when truth covers the whole horizon, `<stem>_acf.csv` with the
/// lag-normalized autocorrelation of truth, truth − global and truth − total.
///
/// Returns the paths written.
pub fn export_plot_data<T: Scalar>(
    result: &ForecastResult<T>,
    dataset: &SeriesDataset,
    path: &Path,
    max_lag: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let (gr, n) = (result.granularity, result.n_variates);
    let h = result.horizon();
    let start = dataset.start_date().and_then(|s| {
        let off = (result.anchor - s).num_days();
        (off >= 0 && off as usize + h <= dataset.len()).then_some(off as usize)
    });
    let truth = start.map(|s| truth_rows(dataset, s, h, false));
    let io = |e| Error::io(format!("writing {}", path.display()), e);

    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(e.to_string()))?;
    w.write_record([
        "date", "intraday", "variate", "global", "local", "total", "truth",
    ])
    .map_err(|e| Error::Validation(e.to_string()))?;
    let names = dataset.variate_names();
    for day in 0..h {
        let date = result.anchor + Duration::days(day as i64);
        for g in 0..gr {
            let r = day * gr + g;
            for j in 0..n {
                let t = truth
                    .as_ref()
                    .map(|t| t[r * n + j].to_string())
                    .unwrap_or_default();
                w.write_record([
                    date.to_string(),
                    g.to_string(),
                    names.get(j).cloned().unwrap_or_else(|| j.to_string()),
                    result.global.at(r, j).to_f64_lossy().to_string(),
                    result.local.at(r, j).to_f64_lossy().to_string(),
                    result.total.at(r, j).to_f64_lossy().to_string(),
                    t,
                ])
                .map_err(|e| Error::Validation(e.to_string()))?;
            }
        }
    }
    w.flush().map_err(io)?;
    let mut written = vec![path.to_path_buf()];

    if let Some(truth) = truth {
        let rows = h * gr;
        let acf_path = companion_path(path);
        let mut f = File::create(&acf_path)
            .map_err(|e| Error::io(format!("writing {}", acf_path.display()), e))?;
        writeln!(f, "variate,lag,truth,truth_minus_global,truth_minus_total").map_err(io)?;
        let lag = max_lag.unwrap_or(rows - 1).min(rows - 1);
        for j in 0..n {
            let col = |f: &dyn Fn(usize) -> f64| (0..rows).map(f).collect::<Vec<f64>>();
            let t = col(&|r| truth[r * n + j]);
            let tg = col(&|r| truth[r * n + j] - result.global.at(r, j).to_f64_lossy());
            let tt = col(&|r| truth[r * n + j] - result.total.at(r, j).to_f64_lossy());
            let (a, b, c) = (
                lagged_autocorrelation(&t, lag)?,
                lagged_autocorrelation(&tg, lag)?,
                lagged_autocorrelation(&tt, lag)?,
            );
            let name = names.get(j).cloned().unwrap_or_else(|| j.to_string());
            for k in 0..=lag {
                writeln!(f, "{name},{k},{},{},{}", a[k], b[k], c[k]).map_err(io)?;
            }
        }
        written.push(acf_path);
    }
    Ok(written)
}

pub fn companion_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("forecast");
    path.with_file_name(format!("{stem}_acf.csv"))
}
