//! Day-patched series datasets: CSV ingestion, chronological splits,
//! train-fitted z-scoring, pretraining targets and 7d-predict-1d samples.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::autocorr::stability_score;
use crate::error::{Error, Result};

/// One day of values, `G × N` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DayPatch {
    pub date: NaiveDate,
    pub granularity: usize,
    pub variates: usize,
    pub values: Vec<f64>,
}

impl DayPatch {
    pub fn at(&self, g: usize, n: usize) -> f64 {
        self.values[g * self.variates + n]
    }

    /// The length-G series of variate `n`.
    pub fn column(&self, n: usize) -> Vec<f64> {
        (0..self.granularity).map(|g| self.at(g, n)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Day-index boundaries: train `[0, train_end)`, val `[train_end, val_end)`,
/// test `[val_end, total)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..self.total,
        }
    }
}

/// Per-variate normalization statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Variates whose training standard deviation was zero (std replaced by 1).
    pub degenerate: Vec<bool>,
}

impl NormStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
            degenerate: vec![false; n],
        }
    }

    pub fn normalize(&self, n: usize, x: f64) -> f64 {
        (x - self.mean[n]) / self.std[n]
    }

    pub fn denormalize(&self, n: usize, z: f64) -> f64 {
        z * self.std[n] + self.mean[n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub region: String,
    dates: Vec<NaiveDate>,
    granularity: usize,
    variates: Vec<String>,
    values: Vec<f64>,
    stats: Option<NormStats>,
    splits: Option<SplitBounds>,
}

impl SeriesDataset {
    /// Dataset of `values.len() / (G·N)` consecutive days starting at `start`.
    pub fn new(
        start: NaiveDate,
        granularity: usize,
        variates: Vec<String>,
        values: Vec<f64>,
        region: impl Into<String>,
    ) -> Result<Self> {
        let n = variates.len();
        if granularity == 0 || n == 0 {
            return Err(Error::Config(
                "granularity and variate count must be positive".into(),
            ));
        }
        let day = granularity * n;
        if !values.len().is_multiple_of(day) {
            return Err(Error::Schema(format!(
                "{} values do not form whole days of {granularity}×{n}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("non-finite value at flat index {i}")));
        }
        let days = values.len() / day;
        let dates = (0..days)
            .map(|i| start + Duration::days(i as i64))
            .collect();
        Ok(Self {
            region: region.into(),
            dates,
            granularity,
            variates,
            values,
            stats: None,
            splits: None,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn granularity(&self) -> usize {
        self.granularity
    }

    pub fn n_variates(&self) -> usize {
        self.variates.len()
    }

    pub fn variate_names(&self) -> &[String] {
        &self.variates
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn date(&self, i: usize) -> NaiveDate {
        self.dates[i]
    }

    pub fn start_date(&self) -> Option<NaiveDate> {
        self.dates.first().copied()
    }

    /// Index of `date`, if it falls inside the dataset.
    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let start = self.start_date()?;
        let off = (date - start).num_days();
        (off >= 0 && (off as usize) < self.len()).then_some(off as usize)
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn splits(&self) -> Option<SplitBounds> {
        self.splits
    }

    pub fn split_range(&self, split: Split) -> Result<Range<usize>> {
        self.splits
            .map(|b| b.range(split))
            .ok_or_else(|| Error::Config("dataset has not been split".into()))
    }

    /// Values of day `i`, `G·N` long.
    pub fn day_values(&self, i: usize) -> &[f64] {
        let day = self.granularity * self.variates.len();
        &self.values[i * day..(i + 1) * day]
    }

    pub fn patch(&self, i: usize) -> DayPatch {
        DayPatch {
            date: self.dates[i],
            granularity: self.granularity,
            variates: self.variates.len(),
            values: self.day_values(i).to_vec(),
        }
    }

    /// The flat row stream, `T·G` rows of `N` values each.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.variates.len())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Which columns of a CSV hold the timestamp and the variates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Defaults to the first column.
    pub timestamp_column: Option<String>,
    /// Defaults to every column except the timestamp.
    pub variates: Option<Vec<String>>,
    /// Points per day the file is expected to have.
    pub granularity: Option<usize>,
    #[serde(default)]
    pub region: String,
}

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<SeriesDataset> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    ingest_reader(file, schema)
}

/// Reads a header-first CSV of timestamped rows into whole-day patches.
///
/// Partial leading and trailing days are trimmed; any other irregularity is
/// an error.
pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();
    let ts_col = match &schema.timestamp_column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("no timestamp column {name:?}")))?,
        None => 0,
    };
    let variate_cols: Vec<(usize, String)> = match &schema.variates {
        Some(names) => names
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .map(|i| (i, name.clone()))
                    .ok_or_else(|| Error::Schema(format!("no variate column {name:?}")))
            })
            .collect::<Result<_>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ts_col)
            .map(|(i, h)| (i, h.to_string()))
            .collect(),
    };
    if variate_cols.is_empty() {
        return Err(Error::Schema("no variate columns".into()));
    }

    let mut stamps: Vec<NaiveDateTime> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Schema(format!("line {line}: {e}")))?;
        let raw_ts = record.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(raw_ts)
            .ok_or_else(|| Error::Schema(format!("line {line}: bad timestamp {raw_ts:?}")))?;
        if let Some(prev) = stamps.last() {
            if ts <= *prev {
                return Err(Error::Order(format!(
                    "line {line}: timestamp {ts} does not follow {prev}"
                )));
            }
        }
        let mut vals = Vec::with_capacity(variate_cols.len());
        for (col, name) in &variate_cols {
            let cell = record.get(*col).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| {
                Error::Schema(format!(
                    "line {line}: column {name}: not a number: {cell:?}"
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Schema(format!(
                    "line {line}: column {name}: missing value"
                )));
            }
            vals.push(v);
        }
        stamps.push(ts);
        rows.push(vals);
    }
    if stamps.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    let granularity = if stamps.len() >= 2 {
        let step = (stamps[1] - stamps[0]).num_seconds();
        if step <= 0 || 86_400 % step != 0 {
            return Err(Error::Schema(format!(
                "interval of {step}s does not divide a day"
            )));
        }
        for w in stamps.windows(2) {
            if (w[1] - w[0]).num_seconds() != step {
                return Err(Error::Schema(format!(
                    "irregular spacing on {}: inconsistent intraday count",
                    w[1].date()
                )));
            }
        }
        (86_400 / step) as usize
    } else {
        schema
            .granularity
            .ok_or_else(|| Error::Schema("cannot infer granularity from one row".into()))?
    };
    if let Some(expected) = schema.granularity {
        if expected != granularity {
            return Err(Error::Schema(format!(
                "expected {expected} points per day, timestamps imply {granularity}"
            )));
        }
    }

    let mut per_day: BTreeMap<NaiveDate, usize> = BTreeMap::new();
    for ts in &stamps {
        *per_day.entry(ts.date()).or_default() += 1;
    }
    let complete: Vec<NaiveDate> = per_day
        .iter()
        .filter(|(_, &c)| c == granularity)
        .map(|(d, _)| *d)
        .collect();
    let (Some(&first), Some(&last)) = (complete.first(), complete.last()) else {
        return Err(Error::Schema("no complete day in the file".into()));
    };
    for (d, &c) in per_day.range(first..=last) {
        if c != granularity {
            return Err(Error::Schema(format!(
                "{d} has {c} points, expected {granularity}"
            )));
        }
    }

    let values: Vec<f64> = stamps
        .iter()
        .zip(rows)
        .filter(|(ts, _)| ts.date() >= first && ts.date() <= last)
        .flat_map(|(_, r)| r)
        .collect();
    let names = variate_cols.into_iter().map(|(_, n)| n).collect();
    SeriesDataset::new(first, granularity, names, values, schema.region.clone())
}

/// Chronological split at `floor(T·train)` and `floor(T·(train+val))`.
// Negated comparisons also reject NaN.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn split(mut dataset: SeriesDataset, ratios: [f64; 3]) -> Result<SeriesDataset> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config(format!(
            "split ratios must be positive: {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
    }
    let t = dataset.len();
    // The small offset keeps products like 10·(0.7+0.1) on the intended side of an integer.
    let cut = |r: f64| ((t as f64) * r + 1e-9).floor() as usize;
    let bounds = SplitBounds {
        train_end: cut(ratios[0]).min(t),
        val_end: cut(ratios[0] + ratios[1]).min(t),
        total: t,
    };
    for s in [Split::Train, Split::Val, Split::Test] {
        if bounds.range(s).is_empty() {
            return Err(Error::Config(format!(
                "{s:?} split is empty for {t} days and ratios {ratios:?}"
            )));
        }
    }
    dataset.splits = Some(bounds);
    Ok(dataset)
}

/// Z-scores every variate with the training split's mean and population
/// standard deviation. A zero deviation is replaced by 1 and flagged.
pub fn normalize(mut dataset: SeriesDataset) -> Result<SeriesDataset> {
    if dataset.stats.is_some() {
        return Err(Error::Config("dataset is already normalized".into()));
    }
    let train = dataset.split_range(Split::Train)?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let n = dataset.n_variates();
    let g = dataset.granularity;
    let rows = &dataset.values[train.start * g * n..train.end * g * n];
    let count = (rows.len() / n) as f64;
    let mut mean = vec![0.0; n];
    for row in rows.chunks(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for row in rows.chunks(n) {
        for j in 0..n {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    let mut degenerate = vec![false; n];
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = (v / count).sqrt();
            if s > 0.0 {
                s
            } else {
                warn!(
                    "variate {} has zero training variance; std set to 1",
                    dataset.variates[j]
                );
                degenerate[j] = true;
                1.0
            }
        })
        .collect();
    let stats = NormStats {
        mean,
        std,
        degenerate,
    };
    for row in dataset.values.chunks_mut(n) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = stats.normalize(j, *v);
        }
    }
    dataset.stats = Some(stats);
    Ok(dataset)
}

/// Undoes [`normalize`], returning a dataset in original units with no stats.
pub fn denormalize(mut dataset: SeriesDataset) -> SeriesDataset {
    if let Some(stats) = dataset.stats.take() {
        let n = dataset.n_variates();
        for row in dataset.values.chunks_mut(n) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = stats.denormalize(j, *v);
            }
        }
    }
    dataset
}

/// Per-date pretraining labels: the day mean and stability score per variate.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainTargets {
    pub n_variates: usize,
    /// `T × N` row-major.
    pub mean: Vec<f64>,
    /// `T × N` row-major.
    pub stability: Vec<f64>,
}

impl PretrainTargets {
    pub fn len(&self) -> usize {
        self.mean.len() / self.n_variates
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean_row(&self, i: usize) -> &[f64] {
        &self.mean[i * self.n_variates..(i + 1) * self.n_variates]
    }

    pub fn stability_row(&self, i: usize) -> &[f64] {
        &self.stability[i * self.n_variates..(i + 1) * self.n_variates]
    }
}

pub fn compute_pretrain_targets(dataset: &SeriesDataset) -> Result<PretrainTargets> {
    let n = dataset.n_variates();
    let g = dataset.granularity();
    let mut mean = Vec::with_capacity(dataset.len() * n);
    let mut stability = Vec::with_capacity(dataset.len() * n);
    for i in 0..dataset.len() {
        let patch = dataset.patch(i);
        for j in 0..n {
            let col = patch.column(j);
            mean.push(col.iter().sum::<f64>() / g as f64);
            stability.push(stability_score(&col)?);
        }
    }
    Ok(PretrainTargets {
        n_variates: n,
        mean,
        stability,
    })
}

/// `lookback` days followed immediately by the target day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSample {
    pub lookback: Range<usize>,
    pub target: usize,
}

/// Every admissible lookback/target pair inside `split`, sliding one day.
pub fn make_training_samples(
    dataset: &SeriesDataset,
    split: Split,
    lookback: usize,
) -> Result<Vec<TrainingSample>> {
    let range = dataset.split_range(split)?;
    if lookback == 0 {
        return Err(Error::Config("lookback must be at least one day".into()));
    }
    if range.len() <= lookback {
        return Err(Error::Config(format!(
            "{split:?} split of {} days is too short for a {lookback}-day lookback",
            range.len()
        )));
    }
    Ok((range.start + lookback..range.end)
        .map(|target| TrainingSample {
            lookback: target - lookback..target,
            target,
        })
        .collect())
}
